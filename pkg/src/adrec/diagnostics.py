"""Embedding-collapse diagnostics and the frozen-embedding linear probe.

The metric battery quantifies how far an item-embedding matrix has moved
from its isotropic random initialization: spectral spread (top singular
values, their variance and entropy), covariance-eigenvalue entropy, a
partition-function isotropy score, and the KL divergence of the fitted
Gaussian from its trace-matched isotropic counterpart. Collapsed
embeddings look like the random init (flat spectrum, isotropy near 1,
small KL); structured embeddings concentrate energy in few directions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .errors import DataError
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-10


def _as_matrix(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise DataError(f"expected an (N, D) embedding matrix, got shape {e.shape}")
    return e


def singular_spectrum(e: np.ndarray) -> np.ndarray:
    """All singular values of the (N, D) matrix, descending.

    Computed from the eigenvalues of the D x D Gram matrix; requires
    N >= D so every singular value is represented.
    """
    e = _as_matrix(e)
    n, d = e.shape
    if n < d:
        raise DataError(f"need at least D={d} rows for the full spectrum, got {n}")
    eigvals = np.linalg.eigvalsh(e.T @ e)
    return np.sqrt(np.clip(eigvals, 0.0, None))[::-1]


def spectrum_stats(sv: np.ndarray) -> tuple[float, float]:
    """(population variance, natural-log entropy) of a singular value set.

    Entropy uses p_i = sigma_i / sum(sigma); an all-zero spectrum has
    entropy 0 by convention (warned).
    """
    sv = np.asarray(sv, dtype=np.float64)
    if sv.size == 0:
        raise DataError("empty singular value set")
    if np.any(sv < 0):
        raise DataError("singular values must be nonnegative")
    variance = float(sv.var())
    total = sv.sum()
    if total == 0.0:
        log.warning("all-zero singular spectrum; entropy defined as 0")
        return variance, 0.0
    p = sv / total
    nz = p[p > 0]
    return variance, float(-(nz * np.log(nz)).sum())


def covariance_entropy(e: np.ndarray) -> float:
    """Entropy of the normalized eigenvalues of the sample covariance."""
    e = _as_matrix(e)
    if e.shape[0] < 2:
        raise DataError("covariance needs at least 2 rows")
    centered = e - e.mean(axis=0)
    cov = centered.T @ centered / (e.shape[0] - 1)
    eigvals = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = eigvals.sum()
    if total == 0.0:
        return 0.0
    p = eigvals / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def isotropy_score(e: np.ndarray) -> float:
    """Partition-function isotropy in (0, 1]; 1 means perfectly isotropic.

    Z(c) = sum_i exp(<e_i, c>) is evaluated at +-each unit eigenvector of
    the Gram matrix; the score is min Z / max Z, computed through
    log-sum-exp so dominant directions cannot overflow.
    """
    e = _as_matrix(e)
    n, d = e.shape
    if n < d:
        raise DataError(f"need at least D={d} rows, got {n}")
    _, vecs = np.linalg.eigh(e.T @ e)
    candidates = np.concatenate([vecs, -vecs], axis=1)  # (D, 2D)
    log_z = logsumexp(e @ candidates, axis=0)
    return float(np.exp(log_z.min() - log_z.max()))


def kl_to_gaussian(e: np.ndarray) -> tuple[float, bool]:
    """KL( N(mu, Cov) || N(mu, s^2 I) ) with s^2 = tr(Cov)/D.

    Measures anisotropy of the fitted Gaussian; 0 iff the covariance is
    already isotropic. Eigenvalues are floored at 1e-10 for the log-det;
    the second return flags whether the floor fired (rank deficiency).
    """
    e = _as_matrix(e)
    n, d = e.shape
    if n <= d:
        raise DataError(f"need more than D={d} rows to fit a full covariance, got {n}")
    centered = e - e.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals = np.linalg.eigvalsh(cov)
    sigma2 = float(np.trace(cov)) / d
    if sigma2 == 0.0:
        return 0.0, True
    floored = bool(np.any(eigvals < EIG_FLOOR))
    eigvals = np.maximum(eigvals, EIG_FLOOR)
    # trace term tr(Cov)/s^2 equals D exactly, so KL reduces to the log-det gap
    kl = 0.5 * float(np.sum(np.log(sigma2) - np.log(eigvals)))
    return max(kl, 0.0), floored


@dataclass
class DiagnosticsReport:
    source: str
    top5_singular: list[float]
    sv_variance: float
    sv_entropy: float
    cov_entropy: float
    isotropy: float
    kl_to_gaussian: float
    kl_floored: bool = False

    def as_dict(self) -> dict:
        return {
            "source": self.source,
            "top5_singular": self.top5_singular,
            "sv_variance": self.sv_variance,
            "sv_entropy": self.sv_entropy,
            "cov_entropy": self.cov_entropy,
            "isotropy": self.isotropy,
            "kl_to_gaussian": self.kl_to_gaussian,
            "kl_floored": self.kl_floored,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def diagnose_embeddings(e: np.ndarray, source: str = "") -> DiagnosticsReport:
    """Run the whole metric battery on an (N, D) item-embedding matrix."""
    sv = singular_spectrum(e)
    variance, entropy = spectrum_stats(sv)
    kl, floored = kl_to_gaussian(e)
    return DiagnosticsReport(
        source=source,
        top5_singular=[float(s) for s in sv[:5]],
        sv_variance=variance,
        sv_entropy=entropy,
        cov_entropy=covariance_entropy(e),
        isotropy=isotropy_score(e),
        kl_to_gaussian=kl,
        kl_floored=floored,
    )


def format_comparison(reports: list[DiagnosticsReport]) -> str:
    """Side-by-side table over checkpoints, one metric per row."""
    metrics = [
        ("top singular", lambda r: f"{r.top5_singular[0]:.4g}"),
        ("sv variance", lambda r: f"{r.sv_variance:.4g}"),
        ("sv entropy", lambda r: f"{r.sv_entropy:.4g}"),
        ("cov entropy", lambda r: f"{r.cov_entropy:.4g}"),
        ("isotropy", lambda r: f"{r.isotropy:.4g}"),
        ("kl to gaussian", lambda r: f"{r.kl_to_gaussian:.4g}"),
    ]
    width = max(18, *(len(r.source) + 2 for r in reports))
    lines = [" " * 16 + "".join(r.source.rjust(width) for r in reports)]
    for label, fmt in metrics:
        lines.append(label.ljust(16) + "".join(fmt(r).rjust(width) for r in reports))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 512
    threshold: float = 0.5
    seed: int = 0


def load_labels(path: str | Path, item_vocab: dict[str, int]) -> tuple[np.ndarray, list[str], int, np.ndarray]:
    """Read `raw_item<TAB>Class1|Class2|...` into a multi-hot matrix.

    Returns (labels for the labeled items in dense-id order, class
    names, count of vocabulary items without labels, boolean mask of
    labeled dense ids). Items in the file but not in the vocabulary are
    ignored; unlabeled vocabulary items are dropped from the probe.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file {path} does not exist")
    raw_labels: dict[str, list[str]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path.name}:{lineno}: expected item<TAB>classes")
        raw_labels[parts[0]] = [c for c in parts[1].split("|") if c]
    classes = sorted({c for labels in raw_labels.values() for c in labels})
    if not classes:
        raise DataError(f"{path} defines no classes")
    class_idx = {c: i for i, c in enumerate(classes)}
    n = len(item_vocab)
    y = np.zeros((n, len(classes)))
    labeled = np.zeros(n, dtype=bool)
    for raw, dense in item_vocab.items():
        if raw in raw_labels:
            labeled[dense - 1] = True
            for c in raw_labels[raw]:
                y[dense - 1, class_idx[c]] = 1.0
    n_unlabeled = int((~labeled).sum())
    if labeled.sum() == 0:
        raise DataError(f"{path} labels no item in the vocabulary")
    return y[labeled], classes, n_unlabeled, labeled


def micro_prf(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over all (item, class) cells."""
    tp = float(((pred == 1) & (truth == 1)).sum())
    fp = float(((pred == 1) & (truth == 0)).sum())
    fn = float(((pred == 0) & (truth == 1)).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def linear_probe(embeddings: np.ndarray, labels: np.ndarray,
                 cfg: ProbeConfig | None = None) -> tuple[float, float, float]:
    """Train a batch-normalized linear head on frozen embeddings.

    Per-feature standardization (full-dataset batch statistics) with a
    trainable affine, then one affine map to per-class logits under BCE;
    Adam, threshold 0.5 for the metrics. The embedding matrix itself is
    a plain array here and cannot receive gradients.
    """
    from .training import Adam  # local import avoids a module cycle

    cfg = cfg or ProbeConfig()
    e = _as_matrix(embeddings)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[0] != e.shape[0]:
        raise DataError(f"labels rows {labels.shape[0]} != embedding rows {e.shape[0]}")
    n, d = e.shape
    n_classes = labels.shape[1]
    x = (e - e.mean(axis=0)) / (e.std(axis=0) + 1e-8)

    rng = np.random.default_rng(cfg.seed)
    gain = Tensor(np.ones(d), requires_grad=True)
    bias = Tensor(np.zeros(d), requires_grad=True)
    w = Tensor(rng.normal(0.0, 0.02, size=(d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    named = [("gain", gain), ("bias", bias), ("w", w), ("b", b)]
    opt = Adam(named, lr_max=cfg.lr)

    def logits_of(rows: np.ndarray) -> Tensor:
        h = T.add(T.mul(Tensor(x[rows]), gain), bias)
        return T.add(T.matmul(h, w), b)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            with GradTape() as tape:
                loss = T.bce_with_logits(logits_of(rows), labels[rows])
                tape.backward(loss)
            opt.step(cfg.lr)
            for _, p in named:
                p.zero_grad()

    with T.no_grad():
        final = logits_of(np.arange(n)).data
    pred = (1.0 / (1.0 + np.exp(-final)) >= cfg.threshold).astype(int)
    return micro_prf(pred, labels.astype(int))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_embeddings(e: np.ndarray, path: str | Path, normalize: bool = False) -> None:
    """Flat-text export: one row per item (id column + D values, full precision)."""
    e = _as_matrix(e)
    if normalize:
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        e = e / norms
    with open(path, "w") as f:
        f.write("item_id," + ",".join(f"dim_{j}" for j in range(e.shape[1])) + "\n")
        for i, row in enumerate(e, start=1):
            f.write(str(i) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def import_embeddings(path: str | Path) -> np.ndarray:
    """Read back an export_embeddings file (round-trip helper)."""
    lines = Path(path).read_text().splitlines()
    rows = [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
    return np.asarray(rows)
