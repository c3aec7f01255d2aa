"""Keypoint-driven pseudo-pairing of unpaired SAR and optical slices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import KeypointAnnotation, keypoints_to_angle, rotate_points


@dataclass(frozen=True)
class AugmentationPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot: float = 0.5
    rot_range_deg: float = 30.0

    def __post_init__(self):
        for p in (self.p_hflip, self.p_vflip, self.p_rot):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class PseudoPair:
    sar: np.ndarray
    sar_kp: KeypointAnnotation
    opt_aligned: np.ndarray
    opt_kp: KeypointAnnotation
    category_id: int
    delta_applied: float
    opt_record: dict


def border_fill(image: np.ndarray, ring: int = 4) -> np.ndarray:
    """Per-channel median of the outer ``ring``-pixel frame. image: (C, H, W)."""
    mask = np.ones(image.shape[1:], dtype=bool)
    mask[ring:-ring, ring:-ring] = False
    return np.median(image[:, mask], axis=1)


def _rot90_exact(image: np.ndarray, k: int) -> np.ndarray:
    # np.rot90 on the (H, W) axes turns the picture counter-clockwise on screen
    return np.ascontiguousarray(np.rot90(image, k=k, axes=(1, 2)))


def rotate_with_padding(image: np.ndarray, keypoints: KeypointAnnotation, delta_deg: float,
                        fill: np.ndarray | str = "border-median") -> tuple[np.ndarray, KeypointAnnotation]:
    """Rotate a (C, H, W) image and its keypoints counter-clockwise by ``delta_deg``.

    Uncovered corners take a constant per-channel fill (border median by default).
    Multiples of 90 degrees on square images are exact index permutations.
    """
    c, h, w = image.shape
    centre = ((w - 1) / 2.0, (h - 1) / 2.0)
    kp = KeypointAnnotation.from_array(rotate_points(keypoints.as_array(), delta_deg, centre))
    if delta_deg == 0:
        return image.copy(), keypoints
    quarter = delta_deg / 90.0
    if h == w and quarter == round(quarter):
        return _rot90_exact(image, int(round(quarter)) % 4), kp
    fill_val = border_fill(image) if isinstance(fill, str) else np.broadcast_to(np.asarray(fill, float), (c,))
    # inverse map: output pixel -> source position (rotate by -delta)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    src = rotate_points(np.stack([uu.ravel(), vv.ravel()], 1), -delta_deg, centre)
    su, sv = src[:, 0].reshape(h, w), src[:, 1].reshape(h, w)
    inside = (su >= -0.5) & (su <= w - 0.5) & (sv >= -0.5) & (sv <= h - 0.5)
    out = np.empty_like(image)
    for ch in range(c):
        res = map_coordinates(image[ch].astype(np.float64), [sv, su], order=1, mode="nearest")
        out[ch] = np.where(inside, res, fill_val[ch])
    return out, kp


def build_pseudo_pair(sar_record: dict, sar_image: np.ndarray, opt_pool: list[dict], load_opt,
                      rng: np.random.Generator, align: bool = True) -> PseudoPair:
    """Draw a same-category optical slice and rotate it onto the SAR heading.

    ``load_opt(record)`` returns the optical image as (3, H, W). With
    ``align=False`` the optical slice is used as drawn (category-only pairing).
    """
    cat = sar_record["category_id"]
    candidates = [r for r in opt_pool if r["category_id"] == cat]
    if not candidates:
        raise ValueError(f"no optical records for category {cat}")
    opt = candidates[int(rng.integers(len(candidates)))]
    opt_kp = KeypointAnnotation(tuple(opt["nose_uv"]), tuple(opt["tail_uv"]))
    sar_kp = KeypointAnnotation(tuple(sar_record["nose_uv"]), tuple(sar_record["tail_uv"]))
    img = load_opt(opt)
    delta = 0.0
    if align:
        delta = (sar_kp.angle - opt_kp.angle) % 360.0
        img, opt_kp = rotate_with_padding(img, opt_kp, delta)
    return PseudoPair(sar_image, sar_kp, img, opt_kp, cat, delta, opt)


def _hflip_kp(kp: KeypointAnnotation, w: int) -> KeypointAnnotation:
    a = kp.as_array()
    a[:, 0] = w - 1 - a[:, 0]
    return KeypointAnnotation.from_array(a)


def _vflip_kp(kp: KeypointAnnotation, h: int) -> KeypointAnnotation:
    a = kp.as_array()
    a[:, 1] = h - 1 - a[:, 1]
    return KeypointAnnotation.from_array(a)


def augment(image: np.ndarray, keypoints: KeypointAnnotation, policy: AugmentationPolicy,
            rng: np.random.Generator, extra: list[np.ndarray] = ()) -> tuple[np.ndarray, KeypointAnnotation] | tuple:
    """Random flips and bounded rotation applied consistently to image and keypoints.

    Arrays in ``extra`` (same H, W) receive the identical geometric transform;
    when given they are returned as a third element.
    """
    _, h, w = image.shape
    imgs = [image, *extra]
    # draw every variate unconditionally so the stream does not depend on outcomes
    do_h, do_v, do_r = rng.random(3) < (policy.p_hflip, policy.p_vflip, policy.p_rot)
    angle = float(rng.uniform(-policy.rot_range_deg, policy.rot_range_deg))
    if do_h:
        imgs = [np.ascontiguousarray(x[:, :, ::-1]) for x in imgs]
        keypoints = _hflip_kp(keypoints, w)
    if do_v:
        imgs = [np.ascontiguousarray(x[:, ::-1, :]) for x in imgs]
        keypoints = _vflip_kp(keypoints, h)
    if do_r:
        rotated = [rotate_with_padding(x, keypoints, angle) for x in imgs]
        imgs = [r[0] for r in rotated]
        keypoints = rotated[0][1]
    if extra:
        return imgs[0], keypoints, imgs[1:]
    return imgs[0], keypoints


def angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def pair_angle_gap(pair: PseudoPair) -> float:
    return angle_gap(keypoints_to_angle(pair.sar_kp.nose_uv, pair.sar_kp.tail_uv),
                     keypoints_to_angle(pair.opt_kp.nose_uv, pair.opt_kp.tail_uv))
