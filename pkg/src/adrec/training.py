"""Adam, cosine annealing, PCGrad combination, three-stage orchestration.

Stage 1 pre-trains the embedding through the conditioning stack with
cross entropy only. Stage 2 warms a freshly initialized backbone up
against the frozen stage-1 embedding for a fixed 5 epochs (weights taken
as-is). Stage 3 fine-tunes everything jointly. Validation runs every few
epochs on HR@K with patience-based early stopping; each stage restarts
the cosine schedule over its own epoch budget.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionDataset, iter_batches
from .diffusion import NoiseSchedule, build_schedule
from .errors import ConfigError, NumericError
from .evaluation import eval_split
from .model import (
    ADRecParams,
    ModelDims,
    diffusion_forward,
    load_checkpoint,
    save_checkpoint,
    stage1_forward,
)
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over any named-parameter provider.

    With an ADRecParams model, a frozen embedding table (and always its
    padding row) is left untouched. Non-finite gradients abort with the
    offending parameter's name.
    """

    def __init__(self, params, lr_max: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr_max = lr_max
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _named(self) -> list[tuple[str, Tensor]]:
        if hasattr(self.params, "named_parameters"):
            return list(self.params.named_parameters())
        return list(self.params)

    def _is_frozen(self, name: str) -> bool:
        if isinstance(self.params, ADRecParams):
            return name.startswith("embedding.") and self.params.embedding.frozen
        return False

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        named = self._named()
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum())
                                  for _, p in named if p.grad is not None))
            scale = self.clip_norm / total if total > self.clip_norm else 1.0
        else:
            scale = 1.0
        for name, p in named:
            if p.grad is None or self._is_frozen(name):
                continue
            g = p.grad if scale == 1.0 else p.grad * scale
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            if name == "embedding.table":
                g = g.copy()
                g[0] = 0.0  # padding row receives no update, ever
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(epoch: int, max_epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_max at epoch 0 to lr_min at max_epochs."""
    if not 0 <= epoch <= max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / max_epochs))


def _flatten(grads: dict[str, np.ndarray], order: list[str]) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in order])


def _unflatten(vec: np.ndarray, like: dict[str, np.ndarray], order: list[str]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for n in order:
        size = like[n].size
        out[n] = vec[pos:pos + size].reshape(like[n].shape)
        pos += size
    return out


def pcgrad_combine(g_a: dict[str, np.ndarray], g_b: dict[str, np.ndarray],
                   rng: np.random.Generator | None = None) -> tuple[dict[str, np.ndarray], bool]:
    """Sum two task gradients, projecting away any conflict first.

    If the flattened gradients have a negative inner product, each is
    projected onto the normal plane of the other's original direction
    before summation (order is immaterial for two tasks; the rng keeps
    the convention's shuffle hook). Returns (combined, conflicted).
    """
    order = sorted(g_a)
    if sorted(g_b) != order:
        raise ValueError("gradient dictionaries cover different parameters")
    va, vb = _flatten(g_a, order), _flatten(g_b, order)
    norm_a, norm_b = float(va @ va), float(vb @ vb)
    if norm_a == 0.0 or norm_b == 0.0:
        return _unflatten(va + vb, g_a, order), False
    dot = float(va @ vb)
    if dot >= 0.0:
        return _unflatten(va + vb, g_a, order), False
    tasks = [(va, vb, norm_b), (vb, va, norm_a)]
    if rng is not None:
        rng.shuffle(tasks)
    projected = [gi - (float(gi @ gj) / nj) * gj for gi, gj, nj in tasks]
    return _unflatten(projected[0] + projected[1], g_a, order), True


@dataclass
class StagePlan:
    stage: int
    max_epochs: int
    validate_every: int = 5
    patience: int = 4
    frozen_embedding: bool = False
    reinit_backbone: bool = False
    select_best: bool = True
    selection_metric: str = "hr20"


def default_stage_plan(stage: int, max_epochs: int | None = None,
                       validate_every: int = 5, patience: int = 4,
                       selection_metric: str = "hr20") -> StagePlan:
    if stage == 1:
        return StagePlan(1, max_epochs or 500, validate_every, patience,
                         selection_metric=selection_metric)
    if stage == 2:
        return StagePlan(2, max_epochs or 5, validate_every, patience,
                         frozen_embedding=True, reinit_backbone=True, select_best=False,
                         selection_metric=selection_metric)
    if stage == 3:
        return StagePlan(3, max_epochs or 500, validate_every, patience,
                         selection_metric=selection_metric)
    raise ConfigError(f"unknown training stage {stage}")


@dataclass
class StageResult:
    params: ADRecParams
    train_rows: list[dict]
    val_rows: list[dict]
    best_metric: float
    n_steps: int = 0
    n_pcgrad_steps: int = 0
    n_conflicts: int = 0
    stopped_early: bool = False


def _snapshot(params: ADRecParams) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.named_parameters()}


def _restore(params: ADRecParams, snap: dict[str, np.ndarray]) -> None:
    for n, p in params.named_parameters():
        p.data = snap[n].copy()


def _collect_grads(params: ADRecParams) -> dict[str, np.ndarray]:
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in params.named_parameters()}


def run_stage(plan: StagePlan, params: ADRecParams, dataset: InteractionDataset,
              schedule: NoiseSchedule, seed: int, batch_size: int = 512,
              lr_max: float = 1e-3, ks: tuple[int, ...] = (10, 20),
              use_pcgrad: bool = False, with_mse: bool = True,
              clip_norm: float | None = None, eval_steps: int | None = None,
              log_every: int = 25) -> StageResult:
    """Train one stage to its epoch budget or early stop; returns best weights.

    Stage 2 ignores selection and returns the final epoch's weights.
    The selection metric is HR or NDCG at the first k in ks matching the
    plan's selection_metric (e.g. "hr20").
    """
    params.embedding.frozen = plan.frozen_embedding
    opt = Adam(params, lr_max=lr_max, clip_norm=clip_norm)
    result = StageResult(params, [], [], best_metric=-math.inf)
    best_snap = None
    bad_validations = 0
    metric_kind = "hr" if plan.selection_metric.startswith("hr") else "ndcg"
    metric_k = int(plan.selection_metric.lstrip("hrndcg") or 20)

    for epoch in range(1, plan.max_epochs + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch - 1, plan.max_epochs, lr_max)
        epoch_seed = np.random.SeedSequence([seed, plan.stage, epoch])
        rng = np.random.default_rng(epoch_seed)
        ce_sum = mse_sum = 0.0
        n_batches = 0
        for batch in iter_batches(dataset, "train", batch_size,
                                  shuffle_seed=int(epoch_seed.generate_state(1)[0])):
            with GradTape() as tape:
                if plan.stage == 1:
                    losses = stage1_forward(batch, params, rng=rng, train=True)
                else:
                    _, losses = diffusion_forward(batch, params, schedule, rng,
                                                  train=True, with_mse=with_mse)
                if use_pcgrad and plan.stage != 1 and with_mse:
                    tape.backward(losses.ce)
                    g_ce = _collect_grads(params)
                    tape.zero_grads()
                    params.zero_grads()
                    tape.backward(losses.mse)
                    g_mse = _collect_grads(params)
                    combined, conflicted = pcgrad_combine(g_ce, g_mse, rng)
                    for n, p in params.named_parameters():
                        p.grad = combined[n]
                    result.n_pcgrad_steps += 1
                    result.n_conflicts += int(conflicted)
                else:
                    tape.backward(losses.total)
            opt.step(lr)
            params.zero_grads()
            ce_sum += losses.ce_value
            mse_sum += losses.mse_value
            n_batches += 1
            result.n_steps += 1
        row = {
            "stage": plan.stage, "epoch": epoch,
            "ce": ce_sum / max(n_batches, 1), "mse": mse_sum / max(n_batches, 1),
            "lr": lr, "seconds": time.perf_counter() - t0,
        }
        result.train_rows.append(row)
        if epoch % log_every == 0 or epoch == 1:
            log.info("stage %d epoch %d: ce=%.4f mse=%.5f lr=%.2e",
                     plan.stage, epoch, row["ce"], row["mse"], lr)

        if epoch % plan.validate_every == 0:
            report = eval_split(params, dataset, "val", schedule=schedule, ks=ks,
                                seed=seed, stage=plan.stage, steps=eval_steps)
            metric = (report.hr if metric_kind == "hr" else report.ndcg)[metric_k]
            improved = metric > result.best_metric
            if improved:
                result.best_metric = metric
                if plan.select_best:
                    best_snap = _snapshot(params)
                bad_validations = 0
            else:
                bad_validations += 1
            result.val_rows.append({
                "stage": plan.stage, "epoch": epoch,
                "hr20": report.hr.get(20, report.hr[max(report.ks)]),
                "ndcg20": report.ndcg.get(20, report.ndcg[max(report.ks)]),
                "is_best": int(improved),
            })
            log.info("stage %d epoch %d: val %s@%d=%.4f%s", plan.stage, epoch,
                     metric_kind, metric_k, metric, " *" if improved else "")
            if plan.select_best and bad_validations >= plan.patience:
                result.stopped_early = True
                log.info("stage %d early stop after %d stale validations", plan.stage, bad_validations)
                break

    if plan.select_best and best_snap is not None:
        _restore(params, best_snap)
    params.embedding.frozen = False
    return result


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------


def _append_csv(path: Path, rows: list[dict], header: list[str]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


@dataclass
class PipelineResult:
    params: ADRecParams
    checkpoints: dict[int, Path]
    stages_run: list[int] = field(default_factory=list)
    stages_resumed: list[int] = field(default_factory=list)
    results: dict[int, StageResult] = field(default_factory=dict)


def run_pipeline(cfg, dataset: InteractionDataset, out_dir: str | Path,
                 dataset_sha: str = "") -> PipelineResult:
    """Execute the configured stages in order, checkpointing each one.

    Stages already checkpointed under a matching config hash are loaded
    instead of retrained (resume); a hash mismatch aborts. The run
    manifest ties the config hash, dataset hash, and seed together.
    """
    from .config import config_hash  # local import: config pulls in this module's types

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    manifest_path = out_dir / "run_manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest["config_hash"] != cfg_hash:
            raise ConfigError(
                f"output dir {out_dir} was produced by a different config "
                f"({manifest['config_hash'][:12]} != {cfg_hash[:12]}); "
                "use a fresh --out dir or restore the original config"
            )
        if dataset_sha and manifest.get("dataset_hash") and manifest["dataset_hash"] != dataset_sha:
            raise ConfigError(f"dataset hash changed under resume in {out_dir}")
    else:
        manifest = {
            "config_hash": cfg_hash,
            "dataset_hash": dataset_sha,
            "seed": cfg.seed,
            "config": cfg.as_dict(),
            "stages_completed": [],
        }

    stages = list(cfg.stages)
    if 2 in stages and 1 not in stages:
        raise ConfigError("stage 2 (warm-up) requires stage 1 (pre-train) in the plan")
    schedule = build_schedule(cfg.diffusion_steps, cfg.schedule_kind)
    dims = cfg.model_dims(dataset.n_items)

    result = PipelineResult(params=None, checkpoints={})
    params: ADRecParams | None = None
    for stage in stages:
        ckpt = out_dir / f"stage{stage}-best.ckpt"
        result.checkpoints[stage] = ckpt
        if ckpt.exists() and stage in manifest["stages_completed"]:
            params, _ = load_checkpoint(ckpt)
            result.stages_resumed.append(stage)
            log.info("stage %d: resumed from %s", stage, ckpt)
            continue

        if stage == 1 or params is None:
            params = ADRecParams.create(dims, cfg.seed)
        elif stage == 3 and 2 not in stages:
            # no warm-up: keep the pre-trained embedding, fresh backbone
            params = params.reinit_backbone(cfg.seed + 300)
        if stage == 2:
            params = params.reinit_backbone(cfg.seed + 200)

        plan = default_stage_plan(
            stage,
            max_epochs=cfg.stage_epochs[stage - 1],
            validate_every=cfg.validate_every,
            patience=cfg.patience,
            selection_metric=cfg.selection_metric,
        )
        stage_result = run_stage(
            plan, params, dataset, schedule, seed=cfg.seed,
            batch_size=cfg.batch_size, lr_max=cfg.lr, ks=tuple(cfg.ks),
            use_pcgrad=cfg.pcgrad, with_mse=(cfg.loss == "joint"),
            clip_norm=cfg.clip_norm,
        )
        params = stage_result.params
        result.results[stage] = stage_result
        result.stages_run.append(stage)
        save_checkpoint(params, ckpt, stage=stage, seed=cfg.seed,
                        schedule_kind=cfg.schedule_kind, t_max=cfg.diffusion_steps,
                        extra={"config_hash": cfg_hash, "loss": cfg.loss})
        _append_csv(out_dir / "train_log.csv", stage_result.train_rows,
                    ["stage", "epoch", "ce", "mse", "lr", "seconds"])
        _append_csv(out_dir / "val_log.csv", stage_result.val_rows,
                    ["stage", "epoch", "hr20", "ndcg20", "is_best"])
        if stage not in manifest["stages_completed"]:
            manifest["stages_completed"].append(stage)
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    result.params = params
    return result
