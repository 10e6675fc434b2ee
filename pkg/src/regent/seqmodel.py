"""The parametric policy: a small causal transformer over retrieved contexts.

A context of ``c`` neighbours becomes the token sequence

    [s_0 r_0, a_0, s_1 r_1, a_1, ..., s_c r_c, a_c]

where index ``c`` is the query. State tokens (state flattened, previous
reward appended, cyclically repeated to ``max_cont_input``) and continuous
action tokens share one linear encoder; discrete actions use a lookup
table. The model predicts an action at every state token. Training is done
through the distance-weighted interpolation with Retrieve-and-Play, so the
loss supervises the blended policy rather than the raw network output.

Everything runs in float64 on CPU.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .agents import InterpConfig, greedy, regent_continuous, regent_discrete
from .core import ContextDatapoint, CtxSet, EnvSpec
from .formats import decode_checkpoint, encode_checkpoint

log = logging.getLogger(__name__)

DTYPE = torch.float64
MLP_RATIO = 4
PROB_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 64
    max_positions: int = 40
    max_cont_input: int = 193
    n_act_max: int = 18
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "hidden", "max_positions", "max_cont_input", "n_act_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if self.max_positions % 2:
            raise ConfigError("max_positions must be even (state/action pairs)")
        if self.n_act_max < 2:
            raise ConfigError("n_act_max must be >= 2")

    @classmethod
    def for_specs(cls, specs: Sequence[EnvSpec], n: int, **kw) -> "ModelConfig":
        """Smallest config that fits every spec with ``n`` neighbours."""
        cont = max(max(s.obs_size + 1, s.act_dims if not s.is_discrete else 0) for s in specs)
        acts = max([s.act_dims for s in specs if s.is_discrete] or [2])
        return cls(max_positions=2 * (n + 1), max_cont_input=cont, n_act_max=acts, **kw)

    def check_spec(self, spec: EnvSpec, n: Optional[int] = None) -> None:
        if spec.obs_size > self.max_cont_input - 1:
            raise ConfigError(
                f"{spec.env_id}: observation of size {spec.obs_size} exceeds max_cont_input - 1 = {self.max_cont_input - 1}"
            )
        if spec.is_discrete and spec.act_dims > self.n_act_max:
            raise ConfigError(f"{spec.env_id}: {spec.act_dims} actions exceed the head width {self.n_act_max}")
        if not spec.is_discrete and spec.act_dims > self.max_cont_input:
            raise ConfigError(f"{spec.env_id}: action size {spec.act_dims} exceeds the continuous head")
        if n is not None and 2 * (n + 1) > self.max_positions:
            raise ConfigError(f"context of {n} needs {2 * (n + 1)} positions, model has {self.max_positions}")


def param_count(cfg: ModelConfig) -> int:
    h, c, a, p = cfg.hidden, cfg.max_cont_input, cfg.n_act_max, cfg.max_positions
    m = MLP_RATIO * h
    encoders = (c * h + h) + a * h + p * h
    block = 2 * 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * m + m) + (m * h + h)
    heads = 2 * h + (h * a + a) + (h * c + c)
    return encoders + cfg.n_layers * block + heads


class Block(nn.Module):
    def __init__(self, hidden, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(hidden, dtype=DTYPE)
        self.qkv = nn.Linear(hidden, 3 * hidden, dtype=DTYPE)
        self.proj = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(hidden, dtype=DTYPE)
        self.fc1 = nn.Linear(hidden, MLP_RATIO * hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(MLP_RATIO * hidden, hidden, dtype=DTYPE)

    def forward(self, x, mask):
        B, T, H = x.shape
        hd = H // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(H, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, H)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class Net(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.cont_enc = nn.Linear(cfg.max_cont_input, h, dtype=DTYPE)
        self.act_emb = nn.Embedding(cfg.n_act_max, h, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_positions, h, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(h, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(h, dtype=DTYPE)
        self.head_disc = nn.Linear(h, cfg.n_act_max, dtype=DTYPE)
        self.head_cont = nn.Linear(h, cfg.max_cont_input, dtype=DTYPE)

    def embed(self, tok: "Tokens") -> torch.Tensor:
        cont = self.cont_enc(torch.as_tensor(tok.cont))
        disc = self.act_emb(torch.as_tensor(tok.disc_ids))
        x = torch.where(torch.as_tensor(tok.disc_mask)[..., None], disc, cont)
        T = x.shape[1]
        return x + self.pos_emb(torch.arange(T))

    def forward(self, tok: "Tokens"):
        x = self.embed(tok)
        T = x.shape[1]
        mask = torch.tril(torch.ones(T, T, dtype=torch.bool))
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln_f(x)[:, 0::2]  # state tokens
        return self.head_disc(x), self.head_cont(x)


class SeqModel:
    """Config plus network. Parameters flatten to one float64 vector in a fixed order."""

    def __init__(self, cfg: ModelConfig, zero_heads: bool = True):
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.net = Net(cfg)
        std = 1.0 / math.sqrt(cfg.hidden)
        with torch.no_grad():
            for name, p in self.net.named_parameters():
                if name.endswith("bias") or ".ln" in name or name.startswith("ln"):
                    p.copy_(torch.ones_like(p) if name.endswith("weight") else torch.zeros_like(p))
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
            if zero_heads:
                for head in (self.net.head_disc, self.net.head_cont):
                    head.weight.zero_()
                    head.bias.zero_()

    def parameters(self):
        return list(self.net.parameters())

    def named_parameters(self):
        return list(self.net.named_parameters())

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def flat_params(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()]).numpy().copy()

    def load_flat(self, flat) -> None:
        flat = torch.as_tensor(np.asarray(flat, dtype=np.float64))
        if flat.numel() != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {flat.numel()}")
        off = 0
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(flat[off : off + p.numel()].view_as(p))
                off += p.numel()

    def clone(self) -> "SeqModel":
        return copy.deepcopy(self)

    def to_bytes(self) -> bytes:
        return encode_checkpoint(asdict(self.cfg), self.flat_params())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SeqModel":
        config, params = decode_checkpoint(buf)
        known = set(ModelConfig.__dataclass_fields__)
        if set(config) != known:
            raise ConfigError(f"checkpoint config keys {sorted(config)} do not match {sorted(known)}")
        model = cls(ModelConfig(**config))
        model.load_flat(params)
        return model

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SeqModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# ------------------------------------------------------------------ tokens


def cyclic_pad(vec: np.ndarray, length: int) -> np.ndarray:
    """Repeat ``vec`` cyclically until it has ``length`` entries."""
    return np.resize(np.asarray(vec, dtype=np.float64).ravel(), length)


@dataclass
class Tokens:
    """Numeric model inputs for a batch of contexts, right-padded to a common length.

    ``n_preds[b]`` is the number of action predictions (neighbours + query)
    for item ``b``; state token ``i`` sits at sequence index ``2 i``.
    """

    cont: np.ndarray  # (B, T, max_cont_input)
    disc_ids: np.ndarray  # (B, T) int64
    disc_mask: np.ndarray  # (B, T) bool
    n_preds: np.ndarray  # (B,)
    targets: Optional[np.ndarray]  # (B, P) int64 or (B, P, act_dims)
    a_prime: np.ndarray  # (B,) int64 or (B, act_dims)
    dists: np.ndarray  # (B, P)

    def __len__(self):
        return len(self.n_preds)

    def take(self, idx) -> "Tokens":
        idx = np.asarray(idx)
        P = int(self.n_preds[idx].max())
        T = 2 * P
        return Tokens(
            self.cont[idx, :T],
            self.disc_ids[idx, :T],
            self.disc_mask[idx, :T],
            self.n_preds[idx],
            None if self.targets is None else self.targets[idx, :P],
            self.a_prime[idx],
            self.dists[idx, :P],
        )

    @property
    def valid(self) -> np.ndarray:
        P = self.dists.shape[1]
        return np.arange(P)[None, :] < self.n_preds[:, None]


def tokenize(ctxs: Sequence[ContextDatapoint], spec: EnvSpec, cfg: ModelConfig, with_targets: bool = True) -> Tokens:
    cfg.check_spec(spec)
    C = cfg.max_cont_input
    P = max(len(c.neighbors) for c in ctxs) + 1
    if 2 * P > cfg.max_positions:
        raise ConfigError(f"context of {P - 1} neighbours needs {2 * P} positions, model has {cfg.max_positions}")
    B = len(ctxs)
    discrete = spec.is_discrete
    cont = np.zeros((B, 2 * P, C))
    disc_ids = np.zeros((B, 2 * P), dtype=np.int64)
    disc_mask = np.zeros((B, 2 * P), dtype=bool)
    n_preds = np.zeros(B, dtype=np.int64)
    dists = np.zeros((B, P))
    if discrete:
        targets = np.zeros((B, P), dtype=np.int64)
        a_prime = np.zeros(B, dtype=np.int64)
    else:
        targets = np.zeros((B, P, spec.act_dims))
        a_prime = np.zeros((B, spec.act_dims))

    def state_token(state, reward):
        return cyclic_pad(np.append(np.asarray(state).ravel(), reward), C)

    for b, ctx in enumerate(ctxs):
        if ctx.query_state.shape != spec.obs_dims:
            raise ConfigError(f"query state shape {ctx.query_state.shape} does not match {spec.env_id}")
        items = [(s.state, s.prev_reward, s.action) for s in ctx.neighbors]
        qa = ctx.query_action
        if qa is None:
            if with_targets:
                raise ValueError("datapoint has no target action")
            qa = 0 if discrete else np.zeros(spec.act_dims)
        items.append((ctx.query_state, ctx.query_prev_reward, qa))
        for i, (s, r, a) in enumerate(items):
            cont[b, 2 * i] = state_token(s, r)
            if discrete:
                disc_ids[b, 2 * i + 1] = int(a)
                disc_mask[b, 2 * i + 1] = True
                targets[b, i] = int(a)
            else:
                cont[b, 2 * i + 1] = cyclic_pad(a, C)
                targets[b, i] = a
        n_preds[b] = len(items)
        dists[b, : len(items)] = ctx.position_dists
        a_prime[b] = ctx.first_action
    return Tokens(cont, disc_ids, disc_mask, n_preds, targets if with_targets else None, a_prime, dists)


def encode_sequence(ctx: ContextDatapoint, spec: EnvSpec, model: SeqModel):
    """Token embeddings (T, hidden) for one context, plus its causal mask (T, T)."""
    tok = tokenize([ctx], spec, model.cfg, with_targets=ctx.query_action is not None)
    with torch.no_grad():
        x = model.net.embed(tok)[0]
    T = x.shape[0]
    return x, torch.tril(torch.ones(T, T, dtype=torch.bool))


def forward(model: SeqModel, tok: Tokens):
    """Head outputs at every state token: (logits, continuous) tensors of shape (B, P, width)."""
    return model.net(tok)


# -------------------------------------------------------------------- loss


def interpolated_loss(
    model: SeqModel,
    tok: Tokens,
    spec: EnvSpec,
    interp: InterpConfig = InterpConfig(),
    through_interp: bool = True,
) -> torch.Tensor:
    """Summed per-datapoint loss over all predictions, averaged over the batch.

    Discrete: cross-entropy of the blended distribution. Continuous: MSE of
    the blended action. The Retrieve-and-Play term carries no parameters.
    """
    if tok.targets is None:
        raise ValueError("loss needs targets")
    logits, raw = forward(model, tok)
    d = torch.as_tensor(tok.dists)
    w = torch.exp(-interp.lam * d)
    valid = torch.as_tensor(tok.valid, dtype=DTYPE)
    if spec.is_discrete:
        n_act = spec.act_dims
        y = torch.as_tensor(tok.targets)
        probs = torch.softmax(logits[..., :n_act], dim=-1)
        if through_interp:
            a1 = torch.as_tensor(tok.a_prime)[:, None].expand_as(y)
            rnp = (d / n_act)[..., None].expand(*d.shape, n_act).clone()
            top = (1.0 + (n_act - 1) * (1.0 - d)) / n_act
            rnp.scatter_(-1, a1[..., None], top[..., None])
            probs = w[..., None] * rnp + (1.0 - w[..., None]) * probs
        p_y = probs.gather(-1, y[..., None])[..., 0]
        per_pos = -torch.log(p_y.clamp_min(PROB_FLOOR))
    else:
        act = raw[..., : spec.act_dims]
        pred = interp.l_scale * act.clamp(-1.0, 1.0)
        if through_interp:
            a1 = torch.as_tensor(tok.a_prime)[:, None, :]
            pred = w[..., None] * a1 + (1.0 - w[..., None]) * pred
        per_pos = ((pred - torch.as_tensor(tok.targets)) ** 2).mean(dim=-1)
    return (per_pos * valid).sum(dim=1).mean()


def loss_and_grad(model: SeqModel, ctxs, spec: EnvSpec, interp: InterpConfig = InterpConfig(), through_interp=True):
    """Loss value and the flat gradient vector (same layout as ``flat_params``)."""
    tok = tokenize(ctxs, spec, model.cfg)
    model.net.zero_grad()
    loss = interpolated_loss(model, tok, spec, interp, through_interp)
    loss.backward()
    grad = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in model.net.parameters()
    ])
    return float(loss.detach()), grad.numpy().copy()


# --------------------------------------------------------------- inference


def predict_raw(model: SeqModel, ctx: ContextDatapoint, spec: EnvSpec) -> np.ndarray:
    """Network output for the query position, sliced to the env's action space."""
    tok = tokenize([ctx], spec, model.cfg, with_targets=False)
    with torch.no_grad():
        logits, raw = forward(model, tok)
    q = len(ctx.neighbors)
    out = logits[0, q, : spec.act_dims] if spec.is_discrete else raw[0, q, : spec.act_dims]
    return out.numpy().copy()


def regent_act(model: SeqModel, ctx: ContextDatapoint, spec: EnvSpec, interp: InterpConfig = InterpConfig()):
    out = predict_raw(model, ctx, spec)
    if spec.is_discrete:
        return greedy(regent_discrete(out, ctx, interp))
    return regent_continuous(out, ctx, interp)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_start: float = 5e-5
    epochs: int = 3
    stop_after_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    single_env_batches: bool = True
    through_interp: bool = True
    max_steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.lr_start > 0:
            raise ConfigError("lr_start must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.epochs < 1 or not 1 <= self.stop_after_epochs <= self.epochs:
            raise ConfigError("need 1 <= stop_after_epochs <= epochs")


@dataclass(frozen=True)
class LogRow:
    step: int
    env_id: str
    loss: float
    lr: float


def _epoch_batches(sizes: Dict[str, int], batch_size: int, single_env: bool, rng: np.random.Generator):
    """One epoch of (env_id, indices) groups. Shuffling the pooled list of
    single-env batches samples environments in proportion to their size."""
    if single_env:
        batches = []
        for env_id in sorted(sizes):
            perm = rng.permutation(sizes[env_id])
            batches += [[(env_id, perm[i : i + batch_size])] for i in range(0, len(perm), batch_size)]
        order = rng.permutation(len(batches))
        return [batches[i] for i in order]
    pool = [(e, i) for e in sorted(sizes) for i in range(sizes[e])]
    perm = rng.permutation(len(pool))
    out = []
    for s in range(0, len(pool), batch_size):
        chunk = [pool[j] for j in perm[s : s + batch_size]]
        groups = {}
        for e, i in chunk:
            groups.setdefault(e, []).append(i)
        out.append([(e, np.array(ix)) for e, ix in sorted(groups.items())])
    return out


def _train(
    model: SeqModel,
    datasets: Dict[str, CtxSet],
    tcfg: TrainConfig,
    interp: InterpConfig,
    lr_start: float,
    run_epochs: int,
    schedule_epochs: int,
    step0: int = 0,
) -> List[LogRow]:
    if not datasets or any(len(cs) == 0 for cs in datasets.values()):
        raise ValueError("every training dataset must be non-empty")
    for cs in datasets.values():
        model.cfg.check_spec(cs.spec, cs.n)
    tokens = {e: tokenize(cs.datapoints, cs.spec, model.cfg) for e, cs in datasets.items()}
    specs = {e: cs.spec for e, cs in datasets.items()}
    sizes = {e: len(cs) for e, cs in datasets.items()}
    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)
    opt = torch.optim.AdamW(
        model.net.parameters(), lr=lr_start, betas=(tcfg.beta1, tcfg.beta2), weight_decay=tcfg.weight_decay
    )
    steps_per_epoch = len(_epoch_batches(sizes, tcfg.batch_size, tcfg.single_env_batches, np.random.default_rng(0)))
    total = schedule_epochs * steps_per_epoch
    limit = run_epochs * steps_per_epoch if tcfg.max_steps is None else min(tcfg.max_steps, run_epochs * steps_per_epoch)
    log_rows = []
    step = 0
    model.net.train()
    while step < limit:
        for batch in _epoch_batches(sizes, tcfg.batch_size, tcfg.single_env_batches, rng):
            if step >= limit:
                break
            lr = lr_start * (1.0 - step / total)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            n_items = sum(len(ix) for _, ix in batch)
            loss = 0.0
            for env_id, ix in batch:
                part = interpolated_loss(model, tokens[env_id].take(ix), specs[env_id], interp, tcfg.through_interp)
                loss = loss + part * (len(ix) / n_items)
            loss.backward()
            opt.step()
            env_label = "+".join(e for e, _ in batch)
            log_rows.append(LogRow(step0 + step, env_label, float(loss.detach()), lr))
            step += 1
    model.net.eval()
    return log_rows


def pretrain(
    datasets: Dict[str, CtxSet],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    interp: InterpConfig = InterpConfig(),
):
    """Fresh model trained for ``stop_after_epochs`` of an ``epochs``-long linear-decay schedule."""
    if not datasets:
        raise ValueError("no training datasets")
    model = SeqModel(model_cfg)
    rows = _train(model, datasets, train_cfg, interp, train_cfg.lr_start, train_cfg.stop_after_epochs, train_cfg.epochs)
    if rows:
        log.info("pretrained %d steps, final loss %.4f", len(rows), rows[-1].loss)
    return model, rows


FINETUNE_LR_FACTOR = 0.1
FINETUNE_EPOCHS = 3


def finetune(
    model: SeqModel,
    dataset: CtxSet,
    train_cfg: TrainConfig = TrainConfig(),
    interp: InterpConfig = InterpConfig(),
):
    """Continue training a copy of ``model`` on one environment: lr / 10, three full epochs, fresh optimizer."""
    model.cfg.check_spec(dataset.spec, dataset.n)
    tuned = model.clone()
    rows = _train(
        tuned,
        {dataset.spec.env_id: dataset},
        train_cfg,
        interp,
        train_cfg.lr_start * FINETUNE_LR_FACTOR,
        FINETUNE_EPOCHS,
        FINETUNE_EPOCHS,
    )
    return tuned, rows


def write_loss_log(rows: Sequence[LogRow], path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "env_id", "loss", "lr"])
        for r in rows:
            w.writerow([r.step, r.env_id, repr(r.loss), repr(r.lr)])
