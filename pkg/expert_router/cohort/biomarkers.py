"""
Optic-nerve-head geometry from fitted disc / cup ellipses
"""
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidAnnotationError

logger = logging.getLogger(__name__)


@dataclass
class Ellipse:
    w: float
    h: float
    theta: float
    cx: float = 0.0
    cy: float = 0.0

    def check(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidAnnotationError(f"ellipse axes must be positive: w={self.w} h={self.h}")
        if not np.all(np.isfinite([self.w, self.h, self.theta, self.cx, self.cy])):
            raise InvalidAnnotationError("ellipse parameters must be finite")


@dataclass
class EllipseAnnotation:
    disc: Ellipse
    cup: Ellipse


@dataclass
class Biomarkers:
    vcdr: float
    acdr: float
    dec: float
    vd_disc: float


def vertical_diameter(w, h, theta):
    """
    VD = 2 sqrt(a^2 sin^2(theta) + b^2 cos^2(theta)) with a = w/2, b = h/2
    """
    a = np.asarray(w, dtype=np.float64) / 2.0
    b = np.asarray(h, dtype=np.float64) / 2.0
    return 2.0 * np.sqrt(a ** 2 * np.sin(theta) ** 2 + b ** 2 * np.cos(theta) ** 2)


def structural_biomarkers(ann: EllipseAnnotation) -> Biomarkers:
    ann.disc.check()
    ann.cup.check()
    vd_d = float(vertical_diameter(ann.disc.w, ann.disc.h, ann.disc.theta))
    if vd_d <= 0:
        raise InvalidAnnotationError("disc vertical diameter is zero")
    vd_c = float(vertical_diameter(ann.cup.w, ann.cup.h, ann.cup.theta))
    acdr = (ann.cup.w * ann.cup.h) / (ann.disc.w * ann.disc.h)
    dec = float(np.hypot(ann.cup.cx - ann.disc.cx, ann.cup.cy - ann.disc.cy)) / vd_d
    return Biomarkers(vcdr=vd_c / vd_d, acdr=float(acdr), dec=dec, vd_disc=vd_d)


def biomarker_arrays(disc: np.ndarray, cup: np.ndarray):
    """
    Vectorised biomarkers for (..., 5) arrays of (w, h, theta, cx, cy)

    Returns (vcdr, acdr, dec, vd_disc).
    """
    disc = np.asarray(disc, dtype=np.float64)
    cup = np.asarray(cup, dtype=np.float64)
    if np.any(disc[..., :2] <= 0) or np.any(cup[..., :2] <= 0):
        raise InvalidAnnotationError("ellipse axes must be positive")
    vd_d = vertical_diameter(disc[..., 0], disc[..., 1], disc[..., 2])
    vd_c = vertical_diameter(cup[..., 0], cup[..., 1], cup[..., 2])
    acdr = (cup[..., 0] * cup[..., 1]) / (disc[..., 0] * disc[..., 1])
    dec = np.hypot(cup[..., 3] - disc[..., 3], cup[..., 4] - disc[..., 4]) / vd_d
    return vd_c / vd_d, acdr, dec, vd_d


def geometry_features(vcdr, acdr, vd_disc, dec) -> np.ndarray:
    """phi = [1, vCDR, aCDR, log VD_disc, dec] along the last axis"""
    vcdr = np.asarray(vcdr, dtype=np.float64)
    return np.stack([np.ones_like(vcdr), vcdr, np.asarray(acdr, dtype=np.float64),
                     np.log(vd_disc), np.asarray(dec, dtype=np.float64)], axis=-1)
