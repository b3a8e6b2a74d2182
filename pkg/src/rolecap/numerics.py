"""Verified numerics: multi-positive contrastive loss, positional-table
extension, and same-image batch-collision probability.

Everything here is a pure function on value inputs, computed in double
precision by default with log-sum-exp stabilization. This module certifies
formulas; it does not train anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimilarityBatch",
    "CorrespondenceMatrix",
    "PositionalTable",
    "CollisionSpec",
    "multipositive_loss_i2t",
    "multipositive_loss",
    "loss_gradient",
    "extend_positional_table",
    "collision_probability",
    "run_verification",
]


@dataclass(frozen=True)
class SimilarityBatch:
    s: np.ndarray  # B x B, s[i, j] = similarity(image i, text j)
    tau: float

    def __post_init__(self) -> None:
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"similarity matrix must be square, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("similarity entries must be finite")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        object.__setattr__(self, "s", s)


@dataclass(frozen=True)
class CorrespondenceMatrix:
    m: np.ndarray  # B x B binary; m[i, j] = 1 iff text j describes image i

    def __post_init__(self) -> None:
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"correspondence matrix must be square, got shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("correspondence entries must be 0 or 1")
        if np.any(m.sum(axis=1) < 1):
            raise ValueError("every image row needs at least one positive text")
        object.__setattr__(self, "m", m)


def _check_pair(batch: SimilarityBatch, m: CorrespondenceMatrix) -> None:
    if batch.s.shape != m.m.shape:
        raise ValueError(f"shape mismatch: s {batch.s.shape} vs m {m.m.shape}")


def _i2t_value(s: np.ndarray, m: np.ndarray, tau: float) -> float:
    b = s.shape[0]
    logits = s / tau
    log_softmax = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    weights = m / m.sum(axis=1, keepdims=True)
    return float(-(weights * log_softmax).sum() / b)


def multipositive_loss_i2t(
    batch: SimilarityBatch, m: CorrespondenceMatrix, dtype=np.float64
) -> float:
    """Image-to-text loss: positives of each image weighted uniformly.

    -(1/B) sum_i sum_j (M_ij / sum_k M_ik) * log softmax_row(s/tau)_ij,
    evaluated with log-sum-exp stabilization.
    """
    _check_pair(batch, m)
    return _i2t_value(batch.s.astype(dtype), m.m.astype(dtype), batch.tau)


def multipositive_loss(
    batch: SimilarityBatch, m: CorrespondenceMatrix, dtype=np.float64
) -> float:
    """Symmetric objective: mean of the image-to-text and text-to-image parts.

    The text-to-image part runs on the transposed matrices, so every text
    column must also contain at least one positive.
    """
    _check_pair(batch, m)
    if np.any(m.m.sum(axis=0) < 1):
        raise ValueError("every text column needs at least one positive image")
    s = batch.s.astype(dtype)
    mm = m.m.astype(dtype)
    return 0.5 * (_i2t_value(s, mm, batch.tau) + _i2t_value(s.T, mm.T, batch.tau))


def loss_gradient(batch: SimilarityBatch, m: CorrespondenceMatrix) -> np.ndarray:
    """Closed-form d(multipositive_loss)/ds.

    For the row direction the per-row gradient is (softmax(s/tau) - W)/tau
    with W the row-normalized correspondence matrix; the column direction is
    symmetric; the halves average with the 1/B factor applied.
    """
    _check_pair(batch, m)
    if np.any(m.m.sum(axis=0) < 1):
        raise ValueError("every text column needs at least one positive image")
    s = batch.s
    mm = m.m
    b = s.shape[0]
    tau = batch.tau
    logits = s / tau

    row_log = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    p_row = np.exp(row_log)
    w_row = mm / mm.sum(axis=1, keepdims=True)

    col_log = logits - np.logaddexp.reduce(logits, axis=0, keepdims=True)
    p_col = np.exp(col_log)
    w_col = mm / mm.sum(axis=0, keepdims=True)

    return (p_row - w_row + p_col - w_col) / (2.0 * b * tau)


@dataclass(frozen=True)
class PositionalTable:
    entries: np.ndarray  # n x d
    keep_prefix: int = 20
    ratio_q: int = 1

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f"entries must be a matrix, got shape {entries.shape}")
        if entries.shape[0] <= self.keep_prefix:
            raise ValueError(
                f"table length {entries.shape[0]} must exceed keep_prefix {self.keep_prefix}"
            )
        if self.ratio_q < 1:
            raise ValueError(f"ratio_q must be >= 1, got {self.ratio_q}")
        object.__setattr__(self, "entries", entries)

    @property
    def length(self) -> int:
        return self.entries.shape[0]


def extend_positional_table(pe: PositionalTable, target_len: int) -> PositionalTable:
    """Stretch a positional table: freeze the first keep_prefix rows, then
    linearly interpolate the tail by an integer stride factor q.

    Output row keep_prefix+i equals (1-lambda)*pe[keep_prefix+j] +
    lambda*pe[keep_prefix+j+1] with lambda=(i mod q)/q and j=i//q; the
    neighbor one past the final row clamps to the final row. q=1 is the
    identity. target_len must equal keep_prefix + q*(n - keep_prefix).
    """
    n = pe.length
    kp = pe.keep_prefix
    tail = n - kp
    if (target_len - kp) % tail != 0 or target_len < n:
        raise ValueError(
            f"target_len {target_len} is not keep_prefix + q*(n - keep_prefix) "
            f"for integer q >= 1 (n={n}, keep_prefix={kp})"
        )
    q = (target_len - kp) // tail
    entries = pe.entries
    out = np.empty((target_len, entries.shape[1]), dtype=entries.dtype)
    out[:kp] = entries[:kp]
    for i in range(q * tail):
        j, r = divmod(i, q)
        lam = r / q
        lower = entries[kp + j]
        upper = entries[min(kp + j + 1, n - 1)]  # clamp past-the-end neighbor
        out[kp + i] = (1.0 - lam) * lower + lam * upper
    return PositionalTable(entries=out, keep_prefix=kp, ratio_q=q)


@dataclass(frozen=True)
class CollisionSpec:
    unique_images: int
    batch_size: int

    def __post_init__(self) -> None:
        if not (1 <= self.batch_size <= self.unique_images):
            raise ValueError(
                f"need 1 <= batch_size <= unique_images, got B={self.batch_size} N={self.unique_images}"
            )


def collision_probability(spec: CollisionSpec, exact: bool = True) -> float:
    """Probability that a batch of B uniformly drawn images contains a repeat.

    Exact: 1 - prod_{k=0}^{B-1}(1 - k/N), evaluated in log space.
    Approximate: 1 - exp(-B(B-1)/(2N)), the standard second-order form.
    """
    n = spec.unique_images
    b = spec.batch_size
    if exact:
        log_no_collision = sum(math.log1p(-k / n) for k in range(b))
        return 1.0 - math.exp(log_no_collision)
    return 1.0 - math.exp(-b * (b - 1) / (2.0 * n))


# ---------------------------------------------------------------------------
# self-check suite behind the `verify` CLI subcommand


def _check_loss_identities(rng: np.random.Generator) -> list[tuple[str, bool, str]]:
    results = []

    batch1 = SimilarityBatch(s=np.array([[3.7]]), tau=0.3)
    v = multipositive_loss_i2t(batch1, CorrespondenceMatrix(m=np.array([[1.0]])))
    results.append(("loss: B=1 single-entry softmax gives 0", abs(v) <= 1e-12, f"value={v:.3e}"))

    b = 5
    s_uniform = SimilarityBatch(s=np.full((b, b), 0.42), tau=0.7)
    m_eye = CorrespondenceMatrix(m=np.eye(b))
    v = multipositive_loss(s_uniform, m_eye)
    results.append(
        ("loss: uniform similarities give log B", abs(v - math.log(b)) <= 1e-12, f"value={v:.12f}")
    )

    worst = 0.0
    for _ in range(20):
        bb = int(rng.integers(2, 9))
        s = rng.normal(size=(bb, bb))
        batch = SimilarityBatch(s=s, tau=0.5)
        m = CorrespondenceMatrix(m=np.eye(bb))
        ours = multipositive_loss(batch, m)
        logits = s / 0.5
        ref_i2t = float(
            np.mean(np.logaddexp.reduce(logits, axis=1) - np.diagonal(logits))
        )
        ref_t2i = float(
            np.mean(np.logaddexp.reduce(logits, axis=0) - np.diagonal(logits))
        )
        worst = max(worst, abs(ours - 0.5 * (ref_i2t + ref_t2i)))
    results.append(
        ("loss: identity M reduces to one-hot contrastive", worst <= 1e-12, f"max diff={worst:.3e}")
    )

    s = rng.normal(size=(6, 6))
    m = np.eye(6)
    m[0, 3] = 1.0
    batch = SimilarityBatch(s=s, tau=0.9)
    base = multipositive_loss_i2t(batch, CorrespondenceMatrix(m=m))
    shifted = s.copy()
    shifted[2, :] += 7.5
    shifted_v = multipositive_loss_i2t(SimilarityBatch(s=shifted, tau=0.9), CorrespondenceMatrix(m=m))
    results.append(
        ("loss: row shift leaves i2t unchanged", abs(base - shifted_v) <= 1e-10, f"diff={abs(base - shifted_v):.3e}")
    )

    nonneg = True
    for _ in range(20):
        bb = int(rng.integers(2, 8))
        s = rng.normal(size=(bb, bb)) * 3
        m = np.eye(bb)
        extra_i = int(rng.integers(0, bb))
        extra_j = int(rng.integers(0, bb))
        m[extra_i, extra_j] = 1.0
        v = multipositive_loss(SimilarityBatch(s=s, tau=0.4), CorrespondenceMatrix(m=m))
        nonneg = nonneg and v >= -1e-12
    results.append(("loss: objective is nonnegative", nonneg, "20 random instances"))
    return results


def _check_gradient(rng: np.random.Generator) -> list[tuple[str, bool, str]]:
    worst_rel = 0.0
    h = 1e-5
    for trial in range(12):
        bb = int(rng.integers(2, 7))
        tau = [0.05, 0.5, 1.0][trial % 3]
        s = rng.normal(size=(bb, bb))
        m = np.eye(bb)
        m[int(rng.integers(0, bb)), int(rng.integers(0, bb))] = 1.0
        batch = SimilarityBatch(s=s, tau=tau)
        cm = CorrespondenceMatrix(m=m)
        grad = loss_gradient(batch, cm)
        numeric = np.zeros_like(grad)
        for i in range(bb):
            for j in range(bb):
                sp = s.copy()
                sp[i, j] += h
                sm = s.copy()
                sm[i, j] -= h
                numeric[i, j] = (
                    multipositive_loss(SimilarityBatch(s=sp, tau=tau), cm)
                    - multipositive_loss(SimilarityBatch(s=sm, tau=tau), cm)
                ) / (2 * h)
        scale = max(float(np.abs(numeric).max()), 1e-12)
        worst_rel = max(worst_rel, float(np.abs(grad - numeric).max()) / scale)
    return [
        (
            "gradient: analytic matches central differences",
            worst_rel <= 1e-5,
            f"max relative error={worst_rel:.3e}",
        )
    ]


def _check_positional(rng: np.random.Generator) -> list[tuple[str, bool, str]]:
    results = []
    pe = PositionalTable(entries=rng.normal(size=(77, 8)), keep_prefix=20)
    out = extend_positional_table(pe, 248)
    ok = (
        out.length == 248
        and out.ratio_q == 4
        and np.array_equal(out.entries[:20], pe.entries[:20])
    )
    results.append(("positional: 77 -> 248 freezes prefix, q=4", ok, f"len={out.length} q={out.ratio_q}"))

    convex = True
    for i in range(248 - 20):
        j = i // 4
        lo = pe.entries[20 + j]
        hi = pe.entries[min(20 + j + 1, 76)]
        row = out.entries[20 + i]
        lower = np.minimum(lo, hi) - 1e-12
        upper = np.maximum(lo, hi) + 1e-12
        convex = convex and bool(np.all(row >= lower) and np.all(row <= upper))
    results.append(("positional: interpolated rows are convex combinations", convex, "all 228 rows"))

    identity = extend_positional_table(pe, 77)
    results.append(
        (
            "positional: q=1 is the identity",
            np.array_equal(identity.entries, pe.entries),
            "bitwise equal",
        )
    )
    return results


def _check_collisions() -> list[tuple[str, bool, str]]:
    results = []
    exact = collision_probability(CollisionSpec(unique_images=10**6, batch_size=2048), exact=True)
    approx = collision_probability(CollisionSpec(unique_images=10**6, batch_size=2048), exact=False)
    results.append(
        (
            "collision: N=1e6, B=2048 exceeds 0.80 (exact and approximate)",
            exact > 0.80 and approx > 0.80 and abs(exact - approx) < 0.005,
            f"exact={exact:.4f} approx={approx:.4f}",
        )
    )
    results.append(
        (
            "collision: B=1 never collides",
            collision_probability(CollisionSpec(unique_images=10, batch_size=1)) == 0.0,
            "",
        )
    )
    v = collision_probability(CollisionSpec(unique_images=2, batch_size=2))
    results.append(("collision: B=2, N=2 gives 1/2", abs(v - 0.5) <= 1e-15, f"value={v}"))

    monotone_b = all(
        collision_probability(CollisionSpec(unique_images=1000, batch_size=b))
        <= collision_probability(CollisionSpec(unique_images=1000, batch_size=b + 1)) + 1e-15
        for b in range(1, 200)
    )
    monotone_n = all(
        collision_probability(CollisionSpec(unique_images=n + 1, batch_size=64))
        <= collision_probability(CollisionSpec(unique_images=n, batch_size=64)) + 1e-15
        for n in range(64, 2000, 7)
    )
    results.append(
        ("collision: monotone in B and in N", monotone_b and monotone_n, "scanned grids")
    )
    return results


def run_verification(seed: int = 20240817) -> list[tuple[str, bool, str]]:
    """Run the numeric invariant suite; returns (name, passed, detail) rows."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, bool, str]] = []
    results.extend(_check_loss_identities(rng))
    results.extend(_check_gradient(rng))
    results.extend(_check_positional(rng))
    results.extend(_check_collisions())
    return results
