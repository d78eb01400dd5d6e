"""The recommender network and its forward paths.

Training wiring: clean history embeddings go through the causal
conditioning stack (CAM); the shifted target embeddings are noised per
token, aggregated with the conditioning and a timestep embedding, and
denoised by a second causal stack (ADM). Scores against the full item
catalog feed a cross-entropy term; the reconstruction feeds an MSE term.
Inference denoises only the final position, walking the schedule down
while the history stays clean.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import SequenceBatch
from .diffusion import NoiseSchedule, inference_grid, posterior_mean, q_sample, sample_train_grid
from .errors import ConfigError, DataError
from .layers import CausalEncoderStack, EmbeddingTable, TimestepMLP
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ADRECKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelDims:
    """Structural hyperparameters needed to rebuild a parameter set."""

    n_items: int
    dim: int = 128
    heads: int = 2
    n_layers: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.1
    max_len: int = 50
    use_positional_encoding: bool = False
    agg_coeff: float = 1e-3
    dtype: str = "float64"

    def resolved_ffn(self) -> int:
        return 4 * self.dim if self.ffn_dim is None else self.ffn_dim

    def np_dtype(self):
        return {"float64": np.float64, "float32": np.float32}[self.dtype]


class ADRecParams:
    """Embedding table plus the two causal stacks and the timestep MLP."""

    def __init__(self, dims: ModelDims, embedding: EmbeddingTable,
                 cam: CausalEncoderStack, adm: CausalEncoderStack, tmlp: TimestepMLP):
        if dims.agg_coeff <= 0:
            raise ConfigError(f"aggregation coefficient must be positive, got {dims.agg_coeff}")
        self.dims = dims
        self.embedding = embedding
        self.cam = cam
        self.adm = adm
        self.tmlp = tmlp

    @classmethod
    def create(cls, dims: ModelDims, seed: int) -> "ADRecParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAD0EC]))
        dt = dims.np_dtype()
        embedding = EmbeddingTable.create(rng, dims.n_items, dims.dim, dtype=dt)
        cam, adm = (CausalEncoderStack.create(
            rng, dims.dim, n_layers=dims.n_layers, heads=dims.heads,
            ffn_dim=dims.resolved_ffn(), dropout_rate=dims.dropout, max_len=dims.max_len,
            use_positional_encoding=dims.use_positional_encoding, dtype=dt,
        ) for _ in range(2))
        tmlp = TimestepMLP.create(rng, dims.dim, dtype=dt)
        return cls(dims, embedding, cam, adm, tmlp)

    def reinit_backbone(self, seed: int) -> "ADRecParams":
        """Fresh CAM/ADM/timestep-MLP around the existing embedding table."""
        fresh = ADRecParams.create(self.dims, seed)
        return ADRecParams(self.dims, self.embedding, fresh.cam, fresh.adm, fresh.tmlp)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.embedding.named_parameters("embedding.")
        yield from self.cam.named_parameters("cam.")
        yield from self.adm.named_parameters("adm.")
        yield from self.tmlp.named_parameters("tmlp.")

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def item_matrix(self) -> Tensor:
        """Catalog rows 1..N as a differentiable (N, D) view of the table."""
        n = self.embedding.n_items
        return T.embedding_gather(self.embedding.table, np.arange(1, n + 1))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class LossBreakdown:
    """ce and mse terms; total is their exact sum."""

    ce: Tensor
    mse: Tensor | None
    total: Tensor

    @property
    def ce_value(self) -> float:
        return float(self.ce.data)

    @property
    def mse_value(self) -> float:
        return 0.0 if self.mse is None else float(self.mse.data)

    @property
    def total_value(self) -> float:
        return float(self.total.data)


@dataclass
class ForwardActivations:
    """Intermediate tensors of one diffusion training pass.

    Softmax scores are not materialized by default; cross entropy fuses
    them. Call softmax_scores() when the normalized matrix is needed.
    """

    e: Tensor
    c: Tensor
    x0: Tensor
    x_t: Tensor
    grid: np.ndarray
    z: Tensor
    x_hat: Tensor
    logits: Tensor

    def softmax_scores(self) -> Tensor:
        return T.softmax_lastdim(self.logits)


def catalog_logits(x: Tensor, params: ADRecParams) -> Tensor:
    """Inner products against every real item embedding: (..., D) -> (..., N)."""
    items = params.item_matrix()
    return T.matmul(x, T.transpose(items, (1, 0)))


def _ce_classes(target_ids: np.ndarray) -> np.ndarray:
    # item id k scores in column k-1; padded targets (0) are masked out but
    # must still index a valid class
    return np.maximum(target_ids - 1, 0)


def stage1_forward(batch: SequenceBatch, params: ADRecParams,
                   rng: np.random.Generator | None = None, train: bool = False) -> LossBreakdown:
    """Conditioning-stack-only pass: cross entropy on CAM outputs, no diffusion."""
    e = params.embedding(batch.history_ids)
    c = params.cam(e, batch.pad_mask, rng=rng, train=train)
    logits = catalog_logits(c, params)
    ce = T.cross_entropy_from_logits(logits, _ce_classes(batch.target_ids), batch.pad_mask)
    return LossBreakdown(ce=ce, mse=None, total=ce)


def aggregate(c: Tensor, x_t: Tensor, t_emb: Tensor, coeff: float) -> Tensor:
    """z = c + coeff * (x_t + t_emb), elementwise."""
    return T.add(c, T.mul(T.add(x_t, t_emb), coeff))


def diffusion_forward(batch: SequenceBatch, params: ADRecParams, schedule: NoiseSchedule,
                      rng: np.random.Generator, train: bool = False,
                      with_mse: bool = True) -> tuple[ForwardActivations, LossBreakdown]:
    """Full training pass: per-token noising, denoising, joint CE+MSE loss."""
    b, length = batch.history_ids.shape
    if length > params.dims.max_len:
        raise ConfigError(f"batch length {length} exceeds model max_len {params.dims.max_len}")
    e = params.embedding(batch.history_ids)
    c = params.cam(e, batch.pad_mask, rng=rng, train=train)
    x0 = params.embedding(batch.target_ids)
    grid = sample_train_grid(b, length, schedule.t_max, batch.pad_mask, rng)
    eps = rng.standard_normal(x0.shape).astype(x0.data.dtype)
    x_t = q_sample(x0, grid, eps, schedule)
    t_emb = params.tmlp(grid, schedule.t_max)
    z = aggregate(c, x_t, t_emb, params.dims.agg_coeff)
    x_hat = params.adm(z, batch.pad_mask, rng=rng, train=train)
    logits = catalog_logits(x_hat, params)
    ce = T.cross_entropy_from_logits(logits, _ce_classes(batch.target_ids), batch.pad_mask)
    if with_mse:
        mse_term = T.mse(x_hat, x0, batch.pad_mask)
        total = T.add(ce, mse_term)
    else:
        mse_term = None
        total = ce
    acts = ForwardActivations(e=e, c=c, x0=x0, x_t=x_t, grid=grid, z=z, x_hat=x_hat, logits=logits)
    return acts, LossBreakdown(ce=ce, mse=mse_term, total=total)


def denoise_last_token(history_ids: np.ndarray, pad_mask: np.ndarray, params: ADRecParams,
                       schedule: NoiseSchedule, rngs: list[np.random.Generator],
                       steps: int | None = None) -> np.ndarray:
    """Reverse diffusion on the final position only; returns (B, N) scores.

    history_ids must be left-padded so the last column holds each row's
    most recent item. Conditioning is computed once from the clean
    history; positions before the last carry their clean next-item
    embeddings at step 0 throughout the walk (they are never noised).
    Each row draws its noise from its own generator: one initial draw,
    then one per reverse step above t=1.
    """
    b, length = history_ids.shape
    if b == 0 or length < 1 or not np.all(pad_mask[:, -1] > 0):
        raise DataError("inference needs a non-empty, left-padded history per row")
    if len(rngs) != b:
        raise ValueError(f"need one rng per row, got {len(rngs)} for batch {b}")
    steps = schedule.t_max if steps is None else steps
    if not 1 <= steps <= schedule.t_max:
        raise ConfigError(f"inference steps must be in [1, {schedule.t_max}], got {steps}")
    dim = params.dims.dim
    dt = params.dims.np_dtype()

    with T.no_grad():
        e = params.embedding(history_ids)
        c = params.cam(e, pad_mask).data

        # clean next-item embeddings for every position except the last
        x0_ids = np.zeros_like(history_ids)
        x0_ids[:, :-1] = np.where(pad_mask[:, :-1] > 0, history_ids[:, 1:], 0)
        x_t = params.embedding(x0_ids).data.copy()

        x_last = np.stack([r.standard_normal(dim) for r in rngs]).astype(dt)
        x_hat_last = None
        for t in range(steps, 0, -1):
            x_t[:, -1, :] = x_last
            grid = np.broadcast_to(inference_grid(length, t), (b, length))
            t_emb = params.tmlp(grid, schedule.t_max).data
            z = c + params.dims.agg_coeff * (x_t + t_emb)
            x_hat = params.adm(Tensor(z, dtype=dt), pad_mask).data
            x_hat_last = x_hat[:, -1, :]
            if t > 1:
                mu = posterior_mean(x_last, x_hat_last, t, schedule)
                noise = np.stack([r.standard_normal(dim) for r in rngs]).astype(dt)
                x_last = mu + np.sqrt(schedule.posterior_var[t]) * noise
            else:
                x_last = x_hat_last  # posterior mean collapses to the prediction
        scores = x_hat_last @ params.embedding.item_rows().T
    return scores


def infer_next(history_ids: np.ndarray, params: ADRecParams, schedule: NoiseSchedule,
               rng: np.random.Generator, steps: int | None = None) -> np.ndarray:
    """Score all items as the next interaction after one user's history."""
    history_ids = np.asarray(history_ids)
    if history_ids.ndim == 2:
        if history_ids.shape[0] != 1:
            raise ValueError("infer_next takes a single history; use denoise_last_token for batches")
        history_ids = history_ids[0]
    if history_ids.size == 0 or np.all(history_ids == 0):
        raise DataError("cannot infer from an empty history")
    valid = history_ids[history_ids > 0]
    length = min(len(valid), params.dims.max_len)
    row = np.zeros((1, length), dtype=np.int64)
    row[0] = valid[-length:]
    mask = np.ones((1, length), dtype=np.float64)
    return denoise_last_token(row, mask, params, schedule, [rng], steps=steps)[0]


def stage1_scores(history_ids: np.ndarray, pad_mask: np.ndarray, params: ADRecParams) -> np.ndarray:
    """Next-item scores from the conditioning stack alone (pre-train model)."""
    with T.no_grad():
        e = params.embedding(history_ids)
        c = params.cam(e, pad_mask).data
        return c[:, -1, :] @ params.embedding.item_rows().T


def rank_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k item ids (1-based), ties broken toward the smaller id."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if k > n:
        raise ConfigError(f"k={k} exceeds catalog size {n}")
    order = np.lexsort((np.arange(n), -scores))
    return order[:k] + 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ADRecParams, path: str | Path, stage: int, seed: int,
                    schedule_kind: str, t_max: int, extra: dict | None = None) -> None:
    """Single-file checkpoint: JSON manifest + flat float64 little-endian blob."""
    tensors = []
    blobs = []
    offset = 0
    for name, p in params.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "manifest": {
            "dims": asdict(params.dims),
            "stage": stage,
            "seed": seed,
            "schedule_kind": schedule_kind,
            "t_max": t_max,
            **(extra or {}),
        },
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[ADRecParams, dict]:
    """Rebuild a parameter set, validating every tensor name and shape."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    head_len = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + head_len].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
    manifest = header["manifest"]
    dims = ModelDims(**manifest["dims"])
    params = ADRecParams.create(dims, seed=0)
    blob = raw[16 + head_len:]
    by_name = {name: p for name, p in params.named_parameters()}
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in by_name:
            raise DataError(f"checkpoint tensor {name!r} has no place in the model")
        p = by_name[name]
        if p.data.shape != shape:
            raise DataError(f"checkpoint tensor {name!r} shape {shape} != model {p.data.shape}")
        flat = np.frombuffer(blob, dtype="<f8", count=entry["nbytes"] // 8,
                             offset=entry["offset"])
        p.data = flat.reshape(shape).astype(dims.np_dtype())
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise DataError(f"checkpoint missing tensors: {sorted(missing)[:3]}...")
    return params, manifest
