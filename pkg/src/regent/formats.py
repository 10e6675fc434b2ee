"""Binary containers for demo sets, preprocessed context sets and checkpoints.

All files share one layout: an 8-byte magic, a little-endian u32 format
version, then sections each prefixed with a u64 byte length. Reals are
IEEE-754 binary64, so round-trips are bit-exact. See docs/formats.md.
"""

from __future__ import annotations

import json
import struct
from typing import IO

import numpy as np

from .core import ContextDatapoint, CtxSet, DemoSet, Demonstration, EnvSpec, Step

FORMAT_VERSION = 1
DEMOSET_MAGIC = b"RGNTDEMO"
CTXSET_MAGIC = b"RGNTCTXS"
CHECKPOINT_MAGIC = b"RGNTCKPT"

_OBS = {"vector": 0, "image": 1}
_ACT = {"discrete": 0, "continuous": 1}
_METRIC = {"l2": 0, "ssim": 1}
_ACT_NONE, _ACT_INT, _ACT_VEC = 0, 1, 2


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"format version {found} not supported (this build reads version {expected})")
        self.found = found
        self.expected = expected


def _inverse(d):
    return {v: k for k, v in d.items()}


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u8(self, v):
        self.raw(struct.pack("<B", v))

    def u32(self, v):
        self.raw(struct.pack("<I", v))

    def u64(self, v):
        self.raw(struct.pack("<Q", v))

    def i64(self, v):
        self.raw(struct.pack("<q", v))

    def f64(self, v):
        self.raw(struct.pack("<d", v))

    def str(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def array(self, a: np.ndarray):
        a = np.asarray(a, dtype="<f8")
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.raw(np.ascontiguousarray(a).tobytes())

    def section(self, body: "Writer"):
        payload = body.getvalue()
        self.u64(len(payload))
        self.raw(payload)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def _unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self):
        return self._unpack("<B")

    def u32(self):
        return self._unpack("<I")

    def u64(self):
        return self._unpack("<Q")

    def i64(self):
        return self._unpack("<q")

    def f64(self):
        return self._unpack("<d")

    def str(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad string: {e}") from None

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)

    def section(self) -> "Reader":
        return Reader(self.take(self.u64()))

    def done(self) -> bool:
        return self.pos == len(self.buf)

    def expect_end(self, what: str):
        if not self.done():
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after {what}")


def _header(w: Writer, magic: bytes):
    w.raw(magic)
    w.u32(FORMAT_VERSION)


def _read_header(r: Reader, magic: bytes):
    found = r.take(8)
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)


def _lookup(table, key, what):
    try:
        return table[key]
    except KeyError:
        raise FormatError(f"unknown {what} tag {key!r}") from None


# ------------------------------------------------------------------ pieces


def _write_spec(w: Writer, spec: EnvSpec):
    w.str(spec.env_id)
    w.u8(_OBS[spec.obs_kind])
    w.u32(len(spec.obs_dims))
    for d in spec.obs_dims:
        w.u32(d)
    w.u8(_ACT[spec.act_kind])
    w.u32(spec.act_dims)
    w.u32(spec.horizon)
    w.f64(spec.random_return)
    w.f64(spec.expert_return)


def _read_spec(r: Reader) -> EnvSpec:
    env_id = r.str()
    obs_kind = _lookup(_inverse(_OBS), r.u8(), "observation kind")
    dims = tuple(r.u32() for _ in range(r.u32()))
    act_kind = _lookup(_inverse(_ACT), r.u8(), "action kind")
    return EnvSpec(env_id, obs_kind, dims, act_kind, r.u32(), r.u32(), r.f64(), r.f64())


def _write_action(w: Writer, a):
    if a is None:
        w.u8(_ACT_NONE)
    elif isinstance(a, np.ndarray):
        w.u8(_ACT_VEC)
        w.array(a)
    else:
        w.u8(_ACT_INT)
        w.i64(int(a))


def _read_action(r: Reader):
    tag = r.u8()
    if tag == _ACT_NONE:
        return None
    if tag == _ACT_INT:
        return r.i64()
    if tag == _ACT_VEC:
        return r.array()
    raise FormatError(f"unknown action tag {tag}")


def _write_step(w: Writer, s: Step):
    w.array(s.state)
    w.f64(s.prev_reward)
    _write_action(w, s.action)


def _read_step(r: Reader) -> Step:
    state = r.array()
    prev = r.f64()
    action = _read_action(r)
    if action is None:
        raise FormatError("step without action")
    return Step(state, prev, action)


# ----------------------------------------------------------------- demoset


def encode_demoset(ds: DemoSet) -> bytes:
    ds.validate()
    w = Writer()
    _header(w, DEMOSET_MAGIC)
    spec = Writer()
    _write_spec(spec, ds.spec)
    w.section(spec)
    demos = Writer()
    demos.u32(len(ds.demos))
    for d in ds.demos:
        demos.i64(d.demo_id)
        demos.f64(d.total_return)
        demos.u32(len(d.steps))
        for s in d.steps:
            _write_step(demos, s)
    w.section(demos)
    ids = Writer()
    ids.u32(len(ds.retrieval_ids))
    for i in ds.retrieval_ids:
        ids.i64(i)
    w.section(ids)
    return w.getvalue()


def decode_demoset(buf: bytes) -> DemoSet:
    r = Reader(buf)
    _read_header(r, DEMOSET_MAGIC)
    sr = r.section()
    spec = _read_spec(sr)
    sr.expect_end("spec")
    dr = r.section()
    demos = []
    for _ in range(dr.u32()):
        demo_id = dr.i64()
        total = dr.f64()
        steps = [_read_step(dr) for _ in range(dr.u32())]
        demos.append(Demonstration(demo_id, steps, total))
    dr.expect_end("demos")
    ir = r.section()
    ids = [ir.i64() for _ in range(ir.u32())]
    ir.expect_end("retrieval ids")
    r.expect_end("demoset")
    return DemoSet(spec, demos, ids)


# ------------------------------------------------------------------ ctxset


def _write_datapoint(w: Writer, dp: ContextDatapoint):
    w.str(dp.env_id)
    w.u32(len(dp.neighbors))
    for s in dp.neighbors:
        _write_step(w, s)
    w.array(dp.query_state)
    w.f64(dp.query_prev_reward)
    _write_action(w, dp.query_action)
    w.f64(dp.dist_first)
    w.array(np.asarray(dp.position_dists))
    w.u32(len(dp.neighbor_refs))
    for d, t in dp.neighbor_refs:
        w.i64(d)
        w.i64(t)
    if dp.query_ref is None:
        w.u8(0)
    else:
        w.u8(1)
        w.i64(dp.query_ref[0])
        w.i64(dp.query_ref[1])


def _read_datapoint(r: Reader) -> ContextDatapoint:
    env_id = r.str()
    neighbors = [_read_step(r) for _ in range(r.u32())]
    qs = r.array()
    qpr = r.f64()
    qa = _read_action(r)
    dist_first = r.f64()
    pos = tuple(r.array().tolist())
    refs = [(r.i64(), r.i64()) for _ in range(r.u32())]
    qref = (r.i64(), r.i64()) if r.u8() else None
    return ContextDatapoint(env_id, neighbors, qs, qpr, qa, dist_first, pos, refs, qref)


def encode_ctxset(cs: CtxSet) -> bytes:
    w = Writer()
    _header(w, CTXSET_MAGIC)
    head = Writer()
    _write_spec(head, cs.spec)
    norm = cs.normalizer
    head.str(norm.env_id)
    head.u8(_METRIC[norm.metric])
    head.f64(norm.scale)
    head.u32(cs.n)
    w.section(head)
    body = Writer()
    body.u32(len(cs.datapoints))
    for dp in cs.datapoints:
        item = Writer()
        _write_datapoint(item, dp)
        body.section(item)
    w.section(body)
    return w.getvalue()


def decode_ctxset(buf: bytes) -> CtxSet:
    from .distance import Normalizer

    r = Reader(buf)
    _read_header(r, CTXSET_MAGIC)
    hr = r.section()
    spec = _read_spec(hr)
    env_id = hr.str()
    metric = _lookup(_inverse(_METRIC), hr.u8(), "metric")
    norm = Normalizer(env_id, hr.f64(), metric)
    n = hr.u32()
    hr.expect_end("ctxset header")
    br = r.section()
    dps = []
    for _ in range(br.u32()):
        item = br.section()
        dps.append(_read_datapoint(item))
        item.expect_end("datapoint")
    br.expect_end("datapoints")
    r.expect_end("ctxset")
    return CtxSet(spec, norm, n, dps)


# -------------------------------------------------------------- checkpoint


def encode_checkpoint(config: dict, params: np.ndarray) -> bytes:
    """``config`` maps names to ints; ``params`` is the flat parameter vector."""
    w = Writer()
    _header(w, CHECKPOINT_MAGIC)
    cfg = Writer()
    cfg.u32(len(config))
    for k in sorted(config):
        cfg.str(k)
        cfg.i64(int(config[k]))
    w.section(cfg)
    p = Writer()
    p.array(np.asarray(params, dtype=np.float64).ravel())
    w.section(p)
    return w.getvalue()


def decode_checkpoint(buf: bytes):
    r = Reader(buf)
    _read_header(r, CHECKPOINT_MAGIC)
    cr = r.section()
    config = {}
    for _ in range(cr.u32()):
        k = cr.str()
        config[k] = cr.i64()
    cr.expect_end("checkpoint config")
    pr = r.section()
    params = pr.array()
    pr.expect_end("parameters")
    r.expect_end("checkpoint")
    return config, params


# ------------------------------------------------------------------- files


def save_demoset(ds: DemoSet, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_demoset(ds))


def load_demoset(path) -> DemoSet:
    with open(path, "rb") as f:
        return decode_demoset(f.read())


def save_ctxset(cs: CtxSet, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_ctxset(cs))


def load_ctxset(path) -> CtxSet:
    with open(path, "rb") as f:
        return decode_ctxset(f.read())


def export_jsonl(ds: DemoSet, out: IO[str]) -> int:
    """One JSON object per step, for eyeballing. Lossy; never read back."""
    count = 0
    for d in ds.demos:
        for t, s in enumerate(d.steps):
            action = s.action.tolist() if isinstance(s.action, np.ndarray) else s.action
            row = {
                "env_id": ds.spec.env_id,
                "demo_id": d.demo_id,
                "t": t,
                "prev_reward": s.prev_reward,
                "action": action,
                "state": s.state.tolist(),
                "retrieval": d.demo_id in ds.retrieval_ids,
            }
            out.write(json.dumps(row) + "\n")
            count += 1
    return count
