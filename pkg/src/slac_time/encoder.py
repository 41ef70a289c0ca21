"""Triplet-set Transformer encoder.

Each observation triplet (time, variable, value) is embedded as the sum of a
continuous-value embedding of its time, a learned row for its variable and a
continuous-value embedding of its value. Self-attention blocks contextualize
the set and an attention-weighted sum fuses it into one vector. There is no
positional index anywhere, so the output is invariant to triplet order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .seeding import stream
from .triplets import Sample


@dataclass(frozen=True)
class EncoderConfig:
    n_variables: int
    d: int = 48
    ffn_units: int = 100
    n_blocks: int = 2
    n_heads: int = 4
    dropout: float = 0.2
    max_triplets: int = 512
    n_static: int = 0

    def __post_init__(self) -> None:
        for name in ("n_variables", "d", "ffn_units", "n_blocks", "n_heads", "max_triplets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_static < 0:
            raise ValueError("n_static must be >= 0")

    @property
    def cve_hidden(self) -> int:
        return math.ceil(math.sqrt(self.d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TripletSet:
    times: np.ndarray  # fraction of the window, in [0, 1)
    variables: np.ndarray
    values: np.ndarray
    static: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass
class TripletBatch:
    times: np.ndarray
    variables: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    static: np.ndarray | None = None

    def __len__(self) -> int:
        return self.mask.shape[0]


def cap_indices(times: np.ndarray, variables: np.ndarray, max_triplets: int) -> np.ndarray:
    """Indices of at most ``max_triplets`` triplets, split evenly across variables and spread in time.

    Input must already be in canonical order; the choice depends only on the set.
    """
    n = times.size
    if n <= max_triplets:
        return np.arange(n)
    groups = {int(f): np.flatnonzero(variables == f) for f in np.unique(variables)}
    alloc: dict[int, int] = {}
    remaining = max_triplets
    by_size = sorted(groups, key=lambda f: (groups[f].size, f))
    for i, f in enumerate(by_size):
        take = min(groups[f].size, remaining // (len(by_size) - i))
        alloc[f] = take
        remaining -= take
    keep = []
    for f, idx in groups.items():
        c, take = idx.size, alloc[f]
        if take:
            keep.append(idx[np.floor((np.arange(take) + 0.5) * c / take).astype(np.int64)])
    return np.sort(np.concatenate(keep))


def make_triplet_set(
    times_s: np.ndarray,
    variables: np.ndarray,
    values: np.ndarray,
    window_len: float,
    max_triplets: int,
    static: np.ndarray | None = None,
) -> TripletSet:
    times_s = np.asarray(times_s, dtype=float)
    variables = np.asarray(variables, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    order = np.lexsort((values, variables, times_s))
    times_s, variables, values = times_s[order], variables[order], values[order]
    keep = cap_indices(times_s, variables, max_triplets)
    return TripletSet(times_s[keep] / window_len, variables[keep], values[keep], static)


def sample_triplets(
    sample: Sample, max_triplets: int, max_bin: int | None = None, static: np.ndarray | None = None
) -> TripletSet:
    """Triplets of a binned sample at bin-midpoint times, optionally restricted to bins ``< max_bin``."""
    sel = slice(None) if max_bin is None else sample.bin_index < max_bin
    return make_triplet_set(
        sample.bin_times()[sel],
        sample.variable[sel],
        sample.value[sel],
        sample.window_len,
        max_triplets,
        static,
    )


def collate(sets: Sequence[TripletSet], pad_to: int | None = None) -> TripletBatch:
    if not sets:
        raise ValueError("cannot collate an empty batch")
    lengths = [len(s) for s in sets]
    if min(lengths) == 0:
        raise ValueError("encode needs at least one triplet per sample")
    width = max(lengths) if pad_to is None else pad_to
    if width < max(lengths):
        raise ValueError(f"pad_to={pad_to} shorter than longest set ({max(lengths)})")
    b = len(sets)
    times = np.zeros((b, width))
    variables = np.zeros((b, width), dtype=np.int64)
    values = np.zeros((b, width))
    mask = np.zeros((b, width), dtype=bool)
    for i, s in enumerate(sets):
        n = len(s)
        times[i, :n] = s.times
        variables[i, :n] = s.variables
        values[i, :n] = s.values
        mask[i, :n] = True
    static = None
    if sets[0].static is not None:
        static = np.stack([np.asarray(s.static, dtype=float) for s in sets])
    return TripletBatch(times, variables, values, mask, static)


# ---------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(config: EncoderConfig, seed: int) -> dict[str, Parameter]:
    """Glorot-uniform weights and zero biases, deterministic per seed."""
    rng = stream(seed, "init", "encoder")
    d, h, F = config.d, config.cve_hidden, config.n_variables
    shapes: list[tuple[str, tuple[int, ...], str]] = []
    for which in ("cve_time", "cve_value"):
        shapes += [(f"{which}.w1", (1, h), "w"), (f"{which}.b1", (h,), "zero"), (f"{which}.w2", (h, d), "w")]
    shapes.append(("variable_table", (F, d), "w"))
    for i in range(config.n_blocks):
        p = f"block{i}"
        shapes += [(f"{p}.{w}", (d, d), "w") for w in ("wq", "wk", "wv", "wo")]
        shapes += [(f"{p}.ln1.g", (d,), "one"), (f"{p}.ln1.b", (d,), "zero")]
        shapes += [(f"{p}.ff.w1", (d, config.ffn_units), "w"), (f"{p}.ff.b1", (config.ffn_units,), "zero")]
        shapes += [(f"{p}.ff.w2", (config.ffn_units, d), "w"), (f"{p}.ff.b2", (d,), "zero")]
        shapes += [(f"{p}.ln2.g", (d,), "one"), (f"{p}.ln2.b", (d,), "zero")]
    shapes += [("fusion.w", (d, 2 * d), "w"), ("fusion.b", (2 * d,), "zero"), ("fusion.u", (2 * d, 1), "w")]
    if config.n_static:
        shapes += [("static.w", (config.n_static, d), "w"), ("static.b", (d,), "zero")]
        shapes += [("static.proj", (2 * d, d), "w"), ("static.proj_b", (d,), "zero")]
    params = {}
    for name, shape, kind in shapes:
        if kind == "w":
            value = glorot(rng, shape[0], shape[1])
        elif kind == "one":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Parameter(value, name=name)
    return params


def linear_head(d_in: int, d_out: int, rng: np.random.Generator, prefix: str = "head") -> dict[str, Parameter]:
    return {
        f"{prefix}.w": Parameter(glorot(rng, d_in, d_out), name=f"{prefix}.w"),
        f"{prefix}.b": Parameter(np.zeros(d_out), name=f"{prefix}.b"),
    }


def apply_head(head: Mapping[str, Parameter], x: Tensor, prefix: str = "head") -> Tensor:
    return x @ head[f"{prefix}.w"] + head[f"{prefix}.b"]


# ---------------------------------------------------------------------------
# forward pass


def _cve(params: Mapping[str, Parameter], which: str, x: np.ndarray) -> Tensor:
    hidden = ad.tanh(x[..., None] @ params[f"{which}.w1"] + params[f"{which}.b1"])
    return hidden @ params[f"{which}.w2"]


def cve_embed(x: float, params: Mapping[str, Parameter], which: str = "cve_value") -> np.ndarray:
    """Continuous value embedding of one scalar: tanh hidden layer, then linear to ``d``."""
    return _cve(params, which, np.array([[float(x)]])).data[0, 0]


def embed_triplet(t: float, f: int, v: float, params: Mapping[str, Parameter]) -> np.ndarray:
    """Initial embedding of a single triplet; ``t`` is already scaled to the window."""
    table = params["variable_table"].data
    if not 0 <= f < table.shape[0]:
        raise IndexError(f"variable id {f} out of range for {table.shape[0]} variables")
    return cve_embed(t, params, "cve_time") + table[f] + cve_embed(v, params, "cve_value")


def embed(params: Mapping[str, Parameter], batch: TripletBatch) -> Tensor:
    return (
        _cve(params, "cve_time", batch.times)
        + ad.take(params["variable_table"], batch.variables)
        + _cve(params, "cve_value", batch.values)
    )


def _attention_block(
    params: Mapping[str, Parameter],
    prefix: str,
    x: Tensor,
    key_mask: np.ndarray,
    config: EncoderConfig,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    b, t, d = x.shape
    h = config.n_heads
    dh = d // h

    def heads(w: str) -> Tensor:
        return ad.transpose(ad.reshape(x @ params[f"{prefix}.{w}"], (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (b, t, d)) @ params[f"{prefix}.wo"]
    x = ad.layer_norm(
        x + ad.dropout(ctx, config.dropout, training, rng), params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]
    )
    ff = ad.relu(x @ params[f"{prefix}.ff.w1"] + params[f"{prefix}.ff.b1"])
    ff = ff @ params[f"{prefix}.ff.w2"] + params[f"{prefix}.ff.b2"]
    return ad.layer_norm(
        x + ad.dropout(ff, config.dropout, training, rng), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"]
    )


def forward(
    params: Mapping[str, Parameter],
    config: EncoderConfig,
    batch: TripletBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Representations ``(B, d)`` for a padded batch; padding is masked out of every softmax."""
    if not batch.mask.any(axis=1).all():
        raise ValueError("encode needs at least one triplet per sample")
    x = embed(params, batch)
    for i in range(config.n_blocks):
        x = _attention_block(params, f"block{i}", x, batch.mask, config, training, rng)
    b, t, d = x.shape
    score = ad.tanh(x @ params["fusion.w"] + params["fusion.b"]) @ params["fusion.u"]
    weights = ad.softmax(ad.reshape(score, (b, 1, t)), axis=-1, mask=batch.mask[:, None, :])
    rep = ad.reshape(weights @ x, (b, d))
    if config.n_static:
        if batch.static is None:
            raise ValueError(f"encoder expects {config.n_static} static features per sample")
        s = ad.tanh(batch.static @ params["static.w"] + params["static.b"])
        rep = ad.concat([rep, s], axis=-1) @ params["static.proj"] + params["static.proj_b"]
    if return_weights:
        return rep, weights.data[:, 0, :]
    return rep


def encode(
    triplets: TripletSet,
    params: Mapping[str, Parameter],
    config: EncoderConfig,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return forward(params, config, collate([triplets]), training=mode == "train", rng=rng).data[0]


def encode_all(
    sets: Sequence[TripletSet],
    params: Mapping[str, Parameter],
    config: EncoderConfig,
    batch_size: int = 32,
) -> np.ndarray:
    """Inference-mode representations for many triplet sets, batched."""
    frozen = {n: Tensor(p.data) for n, p in params.items()}
    out = np.empty((len(sets), config.d))
    # similar lengths share a batch so little work goes into padding
    order = np.argsort([len(s) for s in sets], kind="stable")
    for lo in range(0, len(sets), batch_size):
        chunk = order[lo : lo + batch_size]
        out[chunk] = forward(frozen, config, collate([sets[i] for i in chunk])).data
    return out
