"""Fluency-aware training criteria over mel-spectrograms.

Three families of losses, all computed in float64:

* boundary smoothness -- for each granularity (frame, phoneme, word) and
  each side of the masked span, the per-bin absolute difference between the
  aggregate features just inside and just outside the span is compared
  against the same quantity on the ground truth via MSE;
* contrastive prosody consistency -- an InfoNCE-style loss over cosine
  similarities between masked-region embeddings and full-utterance
  embeddings across a batch, with temperature ``tau``;
* reconstruction -- MAE plus (1 - SSIM) over the masked span.

Every loss has an analytic gradient with respect to the predicted entries
inside the masked span (``loss_gradient``), checkable against
``finite_diff_oracle``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .alignment import AlignmentTable
from .errors import (
    BadTemperature,
    BatchTooSmall,
    EmptyRegion,
    FormatError,
    MissingNeighbor,
    ShapeError,
    ZeroVector,
)
from .masking import MaskSpec
from .spectral import MelSpectrogram

LEVELS = ("frame", "phoneme", "word")
SIDES = ("left", "right")

PROS_MAGIC = b"PROS"


# ---------------------------------------------------------------------------
# Boundary smoothness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryDelta:
    """Per-bin absolute feature jump across one edit boundary."""

    side: str
    level: str
    delta: np.ndarray

    def __post_init__(self):
        if self.side not in SIDES or self.level not in LEVELS:
            raise ValueError(f"unknown side/level {self.side!r}/{self.level!r}")
        delta = np.asarray(self.delta, dtype=np.float64)
        if not np.isfinite(delta).all() or (delta < 0).any():
            raise ValueError("delta entries must be finite and non-negative")
        object.__setattr__(self, "delta", delta)


def _side_units(table: AlignmentTable, span: tuple[int, int], level: str):
    """For each side with both units present: (in-span unit, out-of-span unit).

    Units are half-open frame ranges.  At phoneme/word level the in-span
    unit is the first/last fully masked unit and the neighbor is the
    nearest fully unmasked unit on that side.
    """
    start, end = span
    out: dict[str, tuple[tuple[int, int], tuple[int, int]]] = {}
    if level == "frame":
        if end > start:
            if start >= 1:
                out["left"] = ((start, start + 1), (start - 1, start))
            if end < table.n_frames:
                out["right"] = ((end - 1, end), (end, end + 1))
        return out

    if level == "phoneme":
        starts, ends = table.phoneme_starts, table.phoneme_ends
    else:
        starts, ends = table.word_starts, table.word_ends
    inside = np.flatnonzero((starts >= start) & (ends <= end))
    if inside.size == 0:
        return out
    before = np.flatnonzero(ends <= start)
    after = np.flatnonzero(starts >= end)
    if before.size:
        u, v = inside[0], before[-1]
        out["left"] = ((int(starts[u]), int(ends[u])), (int(starts[v]), int(ends[v])))
    if after.size:
        u, v = inside[-1], after[0]
        out["right"] = ((int(starts[u]), int(ends[u])), (int(starts[v]), int(ends[v])))
    return out


def _theta(data: np.ndarray, unit: tuple[int, int]) -> np.ndarray:
    """Per-bin mean over the unit's frames (identity for a single frame)."""
    return data[unit[0]:unit[1]].mean(axis=0, dtype=np.float64)


def boundary_delta(
    mel: MelSpectrogram,
    table: AlignmentTable,
    spec: MaskSpec,
    level: str,
    side: str,
) -> BoundaryDelta:
    """Absolute per-bin difference between the in-span and neighbor unit."""
    units = _side_units(table, spec.span, level)
    if side not in units:
        raise MissingNeighbor(f"no {side} neighbor at {level} level for span {spec.span}")
    in_unit, out_unit = units[side]
    delta = np.abs(_theta(mel.data, in_unit) - _theta(mel.data, out_unit))
    return BoundaryDelta(side=side, level=level, delta=delta)


def hlac_level_loss(
    pred: MelSpectrogram,
    gt: MelSpectrogram,
    table: AlignmentTable,
    spec: MaskSpec,
    level: str,
) -> float:
    """Sum of left and right boundary-delta MSEs at one granularity."""
    comps = _hlac_side_components(pred, gt, table, spec, level)
    return comps["left"] + comps["right"]


def _hlac_side_components(pred, gt, table, spec, level) -> dict[str, float]:
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"pred {pred.data.shape} vs gt {gt.data.shape}")
    units = _side_units(table, spec.span, level)
    comps = {"left": 0.0, "right": 0.0}
    for side, (in_unit, out_unit) in units.items():
        dp = np.abs(_theta(pred.data, in_unit) - _theta(pred.data, out_unit))
        dg = np.abs(_theta(gt.data, in_unit) - _theta(gt.data, out_unit))
        comps[side] = float(np.mean((dp - dg) ** 2))
    return comps


def hlac_loss(
    pred: MelSpectrogram,
    gt: MelSpectrogram,
    table: AlignmentTable,
    spec: MaskSpec,
) -> tuple[float, dict[str, float]]:
    """Total boundary-smoothness loss plus its six side/level components."""
    components: dict[str, float] = {}
    for level in LEVELS:
        side_comps = _hlac_side_components(pred, gt, table, spec, level)
        components[f"{level}_L"] = side_comps["left"]
        components[f"{level}_R"] = side_comps["right"]
    return sum(components.values()), components


# ---------------------------------------------------------------------------
# Prosody embeddings and the contrastive loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProsodyEmbedding:
    """Fixed-dimension prosody vector; never zero."""

    vector: np.ndarray
    source: str = "external"

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if vec.size == 0:
            raise ZeroVector("embedding has dimension 0")
        if not np.isfinite(vec).all():
            raise ValueError("embedding contains non-finite values")
        if not np.any(vec):
            raise ZeroVector("zero embedding vector rejected")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.size


def _standin_stats(data: np.ndarray, span: tuple[int, int] | None):
    start, end = span if span is not None else (0, data.shape[0])
    if not 0 <= start <= end <= data.shape[0]:
        raise IndexError(f"region [{start}, {end}) out of bounds")
    region = np.asarray(data[start:end], dtype=np.float64)
    if region.shape[0] == 0:
        raise EmptyRegion("prosody embedding needs at least one frame")
    mu = region.mean(axis=0)
    sigma = region.std(axis=0)
    return np.concatenate([mu, sigma]), mu, sigma, region


def prosody_extract_standin(
    mel: MelSpectrogram, span: tuple[int, int] | None = None
) -> ProsodyEmbedding:
    """Deterministic stand-in for a trained prosody encoder.

    The embedding is the concatenation of per-bin mean and per-bin standard
    deviation over the region, L2-normalized; a flat-zero region maps to
    the first unit vector.
    """
    raw, _, _, _ = _standin_stats(mel.data, span)
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raw = np.zeros_like(raw)
        raw[0] = 1.0
        norm = 1.0
    return ProsodyEmbedding(raw / norm, source="standin")


def cosine_sim(a: ProsodyEmbedding, b: ProsodyEmbedding) -> float:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    va, vb = a.vector, b.vector
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(va, vb) / (na * nb))


def cgpc_loss(
    masked_region_embeds: list[ProsodyEmbedding],
    utterance_embeds: list[ProsodyEmbedding],
    tau: float,
) -> float:
    """InfoNCE-style loss pulling each masked region toward its utterance.

    Row i scores sim(m_i, u_i) against sim(m_i, u_k) for k != i; rows are
    stabilized by subtracting the per-row maximum before exponentiation and
    summed in index order.
    """
    if tau <= 0:
        raise BadTemperature(f"temperature must be positive, got {tau}")
    b = len(masked_region_embeds)
    if b != len(utterance_embeds):
        raise ShapeError(f"{b} masked embeddings vs {len(utterance_embeds)} utterances")
    if b < 2:
        raise BatchTooSmall("contrastive loss needs a batch of at least 2")

    total = 0.0
    for i, m in enumerate(masked_region_embeds):
        row = np.array([cosine_sim(m, u) for u in utterance_embeds]) / tau
        z = row - row.max()
        total += float(np.log(np.exp(z).sum()) - z[i])
    return total


# ---------------------------------------------------------------------------
# Reconstruction losses
# ---------------------------------------------------------------------------


def _check_shapes(pred: MelSpectrogram, gt: MelSpectrogram, span: tuple[int, int]):
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"pred {pred.data.shape} vs gt {gt.data.shape}")
    start, end = span
    if not 0 <= start <= end <= pred.n_frames:
        raise IndexError(f"span [{start}, {end}) out of bounds for {pred.n_frames} frames")


def mae_loss(pred: MelSpectrogram, gt: MelSpectrogram, span: tuple[int, int]) -> float:
    """Mean absolute error over the span."""
    _check_shapes(pred, gt, span)
    start, end = span
    if end == start:
        return 0.0
    diff = pred.data[start:end].astype(np.float64) - gt.data[start:end].astype(np.float64)
    return float(np.abs(diff).mean())


def _ssim_windows(x: np.ndarray, y: np.ndarray, w: int, c1: float, c2: float):
    """Uniform-window SSIM statistics for every valid window position."""
    win = np.lib.stride_tricks.sliding_window_view
    mu_x = win(x, (w, w)).mean(axis=(2, 3))
    mu_y = win(y, (w, w)).mean(axis=(2, 3))
    e_xx = win(x * x, (w, w)).mean(axis=(2, 3))
    e_yy = win(y * y, (w, w)).mean(axis=(2, 3))
    e_xy = win(x * y, (w, w)).mean(axis=(2, 3))
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    return (a1 * a2) / (b1 * b2), mu_x, mu_y, a1, a2, b1, b2


def _ssim_params(gt_region: np.ndarray):
    h, w_dim = gt_region.shape
    w = min(7, h, w_dim)
    r = max(float(gt_region.max() - gt_region.min()), 1e-6)
    return w, (0.01 * r) ** 2, (0.03 * r) ** 2


def ssim_loss(pred: MelSpectrogram, gt: MelSpectrogram, span: tuple[int, int]) -> float:
    """1 - mean SSIM over the span treated as a 2-D image.

    Uses square uniform windows of side min(7, span height, n_mels) and
    constants C1=(0.01 R)^2, C2=(0.03 R)^2 with R the ground-truth span's
    dynamic range (clamped below at 1e-6).
    """
    _check_shapes(pred, gt, span)
    start, end = span
    if end == start:
        return 0.0
    x = pred.data[start:end].astype(np.float64)
    y = gt.data[start:end].astype(np.float64)
    w, c1, c2 = _ssim_params(y)
    smap = _ssim_windows(x, y, w, c1, c2)[0]
    return float(1.0 - smap.mean())


# ---------------------------------------------------------------------------
# Combined loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    alpha_hlac: float = 1.0
    beta_cgpc: float = 1.0
    gamma_rec: float = 1.0


@dataclass(frozen=True)
class BatchContext:
    """Embeddings of the other batch items, used as contrastive negatives."""

    masked: tuple[ProsodyEmbedding, ...]
    utterances: tuple[ProsodyEmbedding, ...]

    def __post_init__(self):
        if len(self.masked) != len(self.utterances):
            raise ShapeError("batch context lists must have equal length")
        object.__setattr__(self, "masked", tuple(self.masked))
        object.__setattr__(self, "utterances", tuple(self.utterances))

    def __len__(self) -> int:
        return len(self.masked)


@dataclass(frozen=True)
class LossBreakdown:
    """Every loss component plus the weighted total."""

    hlac_frame_L: float
    hlac_frame_R: float
    hlac_phoneme_L: float
    hlac_phoneme_R: float
    hlac_word_L: float
    hlac_word_R: float
    hlac_total: float
    cgpc: float
    mae: float
    ssim_loss: float
    total: float
    weights: LossWeights


def total_loss(
    pred: MelSpectrogram,
    gt: MelSpectrogram,
    table: AlignmentTable,
    spec: MaskSpec,
    batch: BatchContext | None,
    weights: LossWeights = LossWeights(),
    tau: float = 0.1,
) -> LossBreakdown:
    """Weighted sum gamma*(MAE + SSIM loss) + alpha*HLAC + beta*CGPC.

    ``batch`` supplies the contrastive negatives; it may be None only when
    ``weights.beta_cgpc`` is zero (in which case the CGPC term is skipped
    and reported as 0).
    """
    hlac_total, comps = hlac_loss(pred, gt, table, spec)
    mae = mae_loss(pred, gt, spec.span)
    ssim = ssim_loss(pred, gt, spec.span)

    if weights.beta_cgpc != 0.0 or (batch is not None and len(batch) > 0):
        if batch is None or len(batch) == 0:
            raise BatchTooSmall("contrastive loss needs negatives; supply a BatchContext")
        m0 = prosody_extract_standin(pred, spec.span)
        u0 = prosody_extract_standin(gt, None)
        cgpc = cgpc_loss(
            [m0, *batch.masked], [u0, *batch.utterances], tau
        )
    else:
        cgpc = 0.0

    total = (
        weights.gamma_rec * (mae + ssim)
        + weights.alpha_hlac * hlac_total
        + weights.beta_cgpc * cgpc
    )
    return LossBreakdown(
        hlac_frame_L=comps["frame_L"],
        hlac_frame_R=comps["frame_R"],
        hlac_phoneme_L=comps["phoneme_L"],
        hlac_phoneme_R=comps["phoneme_R"],
        hlac_word_L=comps["word_L"],
        hlac_word_R=comps["word_R"],
        hlac_total=hlac_total,
        cgpc=cgpc,
        mae=mae,
        ssim_loss=ssim,
        total=total,
        weights=weights,
    )


def breakdown_to_json(bd: LossBreakdown) -> dict:
    return {
        "hlac_frame_L": bd.hlac_frame_L,
        "hlac_frame_R": bd.hlac_frame_R,
        "hlac_phoneme_L": bd.hlac_phoneme_L,
        "hlac_phoneme_R": bd.hlac_phoneme_R,
        "hlac_word_L": bd.hlac_word_L,
        "hlac_word_R": bd.hlac_word_R,
        "hlac_total": bd.hlac_total,
        "cgpc": bd.cgpc,
        "mae": bd.mae,
        "ssim_loss": bd.ssim_loss,
        "total": bd.total,
        "weights": {
            "alpha": bd.weights.alpha_hlac,
            "beta": bd.weights.beta_cgpc,
            "gamma": bd.weights.gamma_rec,
        },
    }


def breakdown_from_json(obj) -> LossBreakdown:
    try:
        weights = LossWeights(
            alpha_hlac=float(obj["weights"]["alpha"]),
            beta_cgpc=float(obj["weights"]["beta"]),
            gamma_rec=float(obj["weights"]["gamma"]),
        )
        return LossBreakdown(
            hlac_frame_L=float(obj["hlac_frame_L"]),
            hlac_frame_R=float(obj["hlac_frame_R"]),
            hlac_phoneme_L=float(obj["hlac_phoneme_L"]),
            hlac_phoneme_R=float(obj["hlac_phoneme_R"]),
            hlac_word_L=float(obj["hlac_word_L"]),
            hlac_word_R=float(obj["hlac_word_R"]),
            hlac_total=float(obj["hlac_total"]),
            cgpc=float(obj["cgpc"]),
            mae=float(obj["mae"]),
            ssim_loss=float(obj["ssim_loss"]),
            total=float(obj["total"]),
            weights=weights,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed loss JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Analytic gradient
# ---------------------------------------------------------------------------


def _mae_gradient(x, y, span):
    start, end = span
    grad = np.zeros_like(x)
    n = (end - start) * x.shape[1]
    if n:
        grad[start:end] = np.sign(x[start:end] - y[start:end]) / n
    return grad


def _ssim_gradient(x_full, y_full, span):
    start, end = span
    grad = np.zeros_like(x_full)
    if end == start:
        return grad
    x = x_full[start:end]
    y = y_full[start:end]
    w, c1, c2 = _ssim_params(y)
    smap, mu_x, mu_y, a1, a2, b1, b2 = _ssim_windows(x, y, w, c1, c2)
    n = float(w * w)
    n_win = smap.size
    # dS/dx_j decomposes as c0 + c1x*x_j + c2y*y_j per covering window.
    coef_x = -(2.0 / n) * smap / b2
    coef_y = (2.0 / n) * a1 / (b1 * b2)
    coef_0 = (2.0 / n) * (
        mu_y * (a2 - a1) / (b1 * b2) + smap * mu_x * (1.0 / b2 - 1.0 / b1)
    )
    ones = np.ones((w, w))

    def spread(c):
        # Sum each window's coefficient into the pixels it covers.
        return convolve2d(c, ones, mode="full")

    ds_dx = spread(coef_0) + x * spread(coef_x) + y * spread(coef_y)
    grad[start:end] = -ds_dx / n_win
    return grad


def _hlac_gradient(x_full, y_full, table, spec):
    grad = np.zeros_like(x_full)
    start, end = spec.span
    n_mels = x_full.shape[1]
    for level in LEVELS:
        for side, (in_unit, out_unit) in _side_units(table, spec.span, level).items():
            ti = _theta(x_full, in_unit)
            to = _theta(x_full, out_unit)
            dp = np.abs(ti - to)
            dg = np.abs(_theta(y_full, in_unit) - _theta(y_full, out_unit))
            # d/d theta_in of mean_b (dp - dg)^2
            dtheta = (2.0 / n_mels) * (dp - dg) * np.sign(ti - to)
            a, b = in_unit
            grad[a:b] += dtheta / (b - a)
    return grad


def _cgpc_gradient(x_full, spec, u_hats, tau):
    """Gradient of the batch row that scores the predicted masked region.

    Only that row depends on pred: its embedding is r/|r| with
    r = (mean, std) over the span, and s_j = r_hat . u_hat_j.  The other
    rows' masked embeddings are constants.
    """
    grad = np.zeros_like(x_full)
    start, end = spec.span
    raw, mu, sigma, region = _standin_stats(x_full, spec.span)
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        return grad  # flat-zero region is pinned to e_1, locally constant
    r_hat = raw / norm

    sims = np.array([np.dot(r_hat, u) for u in u_hats])
    z = sims / tau
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    dl_ds = p / tau
    dl_ds[0] -= 1.0 / tau

    g_r = np.zeros_like(raw)
    for j, u in enumerate(u_hats):
        g_r += dl_ds[j] * (u - sims[j] * r_hat)
    g_r /= norm

    n_mels = x_full.shape[1]
    t = end - start
    g_mu = g_r[:n_mels]
    g_sigma = g_r[n_mels:]
    grad_region = np.tile(g_mu / t, (t, 1))
    safe = sigma > 0
    grad_region[:, safe] += g_sigma[safe] * (region[:, safe] - mu[safe]) / (t * sigma[safe])
    grad[start:end] = grad_region
    return grad


def _unit_vector(emb: ProsodyEmbedding) -> np.ndarray:
    return emb.vector / np.linalg.norm(emb.vector)


def loss_gradient(
    pred: MelSpectrogram,
    gt: MelSpectrogram,
    table: AlignmentTable,
    spec: MaskSpec,
    batch: BatchContext | None,
    weights: LossWeights = LossWeights(),
    tau: float = 0.1,
) -> np.ndarray:
    """Analytic d(total_loss)/d(pred) over the masked span.

    Entries outside the span are zero by construction; |a - b| terms use
    the subgradient sign(a - b) with sign(0) = 0.
    """
    _check_shapes(pred, gt, spec.span)
    x = np.asarray(pred.data, dtype=np.float64)
    y = np.asarray(gt.data, dtype=np.float64)
    grad = np.zeros_like(x)
    if weights.gamma_rec != 0.0:
        grad += weights.gamma_rec * (
            _mae_gradient(x, y, spec.span) + _ssim_gradient(x, y, spec.span)
        )
    if weights.alpha_hlac != 0.0:
        grad += weights.alpha_hlac * _hlac_gradient(x, y, table, spec)
    if weights.beta_cgpc != 0.0:
        if batch is None or len(batch) == 0:
            raise BatchTooSmall("contrastive loss needs negatives; supply a BatchContext")
        u_hats = [_unit_vector(prosody_extract_standin(gt, None))]
        u_hats += [_unit_vector(u) for u in batch.utterances]
        grad += weights.beta_cgpc * _cgpc_gradient(x, spec, u_hats, tau)
    return grad


def finite_diff_oracle(f, x: np.ndarray, h: float, coords=None) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x``.

    ``coords`` optionally restricts differentiation to a boolean mask or
    index set; other entries of the result are zero.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    if coords is None:
        indices = np.ndindex(*x.shape)
    else:
        mask = np.zeros(x.shape, dtype=bool)
        mask[coords] = True
        indices = zip(*np.nonzero(mask))
    for idx in indices:
        bump = x.copy()
        bump[idx] = x[idx] + h
        hi = f(bump)
        bump[idx] = x[idx] - h
        lo = f(bump)
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Embedding file format ("PROS")
# ---------------------------------------------------------------------------


def write_embedding(emb: ProsodyEmbedding, sink) -> None:
    """Flat f32 embedding file: magic "PROS" | dim u32 | data f32[dim]."""
    blob = PROS_MAGIC + struct.pack("<I", emb.dim) + emb.vector.astype("<f4").tobytes()
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        with open(sink, "wb") as fh:
            fh.write(blob)


def read_embedding(source) -> ProsodyEmbedding:
    if hasattr(source, "read"):
        blob = source.read()
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    if len(blob) < 8:
        raise FormatError("truncated embedding header", offset=len(blob))
    if blob[:4] != PROS_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    (dim,) = struct.unpack_from("<I", blob, 4)
    if len(blob) != 8 + 4 * dim:
        raise FormatError(
            f"payload holds {len(blob) - 8} bytes, header promises {4 * dim}",
            offset=len(blob) if len(blob) < 8 + 4 * dim else 8 + 4 * dim,
        )
    vec = np.frombuffer(blob, dtype="<f4", offset=8).astype(np.float64)
    try:
        return ProsodyEmbedding(vec, source="external")
    except (ZeroVector, ValueError) as exc:
        raise FormatError(f"invalid embedding payload: {exc}", offset=8) from exc
