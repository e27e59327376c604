"""Image quality metrics, data residuals and the reference-independent
deformation loss."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from skimage.metrics import structural_similarity

from hmlab.core import check_same_shape
from hmlab.forward import ApproxModelConfig, CoilSet, forward_approx
from hmlab.sampling import KSpaceData, SamplingSchedule
from hmlab.warp import DeformationField, compose, invert_field, laplacian, mean_field


@dataclass(frozen=True)
class QualityReport:
    res: float | None
    psnr: float
    ssim: float
    mse: float
    field_loss: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["field_loss"] is None:
            del d["field_loss"]
        return d

    def to_text(self) -> str:
        """JSON text; an infinite PSNR is written as the string ``"inf"``."""
        d = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in self.to_dict().items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "QualityReport":
        d = json.loads(text)
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        return cls(**d)


def _mag_pair(ref, test):
    ref = np.abs(np.asarray(ref))
    test = np.abs(np.asarray(test))
    check_same_shape(ref.shape, test.shape, "reference vs test image")
    return ref, test


def mse(ref, test) -> float:
    """Mean squared difference of the magnitude images."""
    a, b = _mag_pair(ref, test)
    return float(np.mean((a - b) ** 2))


def psnr(ref, test) -> float:
    """Peak SNR in dB with the peak at ``max |ref|``; ``inf`` when identical."""
    a, b = _mag_pair(ref, test)
    peak = a.max()
    if peak == 0:
        raise ValueError("reference image is all zero")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def ssim(ref, test) -> float:
    """Mean SSIM of the magnitude images.

    Gaussian 11x11 window with sigma 1.5, K1 = 0.01, K2 = 0.03 and the data
    range set to ``max |ref|``.
    """
    a, b = _mag_pair(ref, test)
    data_range = float(a.max()) or 1.0
    return float(
        structural_similarity(
            a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
    )


def residual(y: KSpaceData, s, keyframes, coils: CoilSet, schedule: SamplingSchedule,
             cfg: ApproxModelConfig = ApproxModelConfig()) -> float:
    """Relative data residual ``100 ||y - A s|| / ||y||`` in percent."""
    ny = np.linalg.norm(y.lines)
    if ny == 0:
        raise ValueError("residual of zero data is undefined")
    pred = forward_approx(s, keyframes, coils, schedule, cfg)
    return float(100.0 * np.linalg.norm(y.lines - pred.lines) / ny)


def tilde_normalize(fields, **invert_kw) -> list:
    """Refer every field to the inverse of the mean field:
    ``U_i o mean(U)^-1``. The result does not depend on which configuration
    served as reference (exactly for translations)."""
    fields = list(fields)
    inv = invert_field(mean_field(fields), **invert_kw)
    return [compose(u, inv) for u in fields]


def _sq(u: DeformationField) -> float:
    return float(np.mean(u.dx**2 + u.dy**2))


def field_loss(est, ref, beta: float = 0.0) -> float:
    """Mean squared distance of the tilde-normalized field sets plus ``beta``
    times the mean squared Laplacian of the raw estimate.

    Means run over keyframes and pixels so the value is in px^2 and does
    not grow with the grid size.
    """
    est, ref = list(est), list(ref)
    if len(est) != len(ref):
        raise ValueError(f"field counts differ: {len(est)} vs {len(ref)}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    for e, r in zip(est, ref):
        check_same_shape(e.shape, r.shape, "estimated vs reference field")
    te, tr = tilde_normalize(est), tilde_normalize(ref)
    loss = float(np.mean([_sq(a - b) for a, b in zip(te, tr)]))
    if beta > 0:
        loss += beta * float(np.mean([_sq(laplacian(e)) for e in est]))
    return loss


def quality_report(ref, test, res=None, est_fields=None, ref_fields=None, beta=0.0) -> QualityReport:
    loss = None
    if est_fields is not None and ref_fields is not None:
        loss = field_loss(est_fields, ref_fields, beta)
    return QualityReport(res=res, psnr=psnr(ref, test), ssim=ssim(ref, test), mse=mse(ref, test), field_loss=loss)
