"""Procedural unpaired SAR / optical aircraft slices with keypoint annotations.

Aircraft are drawn as fuselage, wing, tailplane and engine polygons. The
optical renderer fills them with a per-category hue over a runway-gray
background; the SAR renderer only places bright scatterers at structural
corners and applies unit-mean gamma speckle.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.draw import polygon as draw_polygon

from .geometry import KeypointAnnotation, keypoints_to_angle

MODALITIES = ("sar", "opt")
SPLITS = ("train", "test")
MARGIN = 4
SUPERSAMPLE = 4


@dataclass(frozen=True)
class AircraftSpec:
    """Airframe parameters in pixels (for a given canvas size)."""

    category_id: int
    name: str
    fuselage_length: float
    fuselage_width: float
    wingspan: float
    wing_position: float  # fraction of fuselage length measured from the nose
    wing_sweep_deg: float
    engine_count: int
    tail_span: float
    hue: float

    def __post_init__(self):
        for f in ("fuselage_length", "fuselage_width", "wingspan", "tail_span"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if not 0.0 <= self.wing_position <= 1.0:
            raise ValueError("wing_position must be in [0, 1]")
        if self.engine_count not in (2, 4):
            raise ValueError("engine_count must be 2 or 4")


# (name, length, width, span, wing position, sweep, engines, tail span, hue), lengths relative
# to the usable radius of the canvas
_CATALOG = [
    ("twin-fwd-swept", 1.80, 0.20, 1.70, 0.40, 30.0, 2, 0.60, 0.00),
    ("twin-aft-straight", 1.60, 0.22, 1.85, 0.58, 8.0, 2, 0.75, 0.33),
    ("quad-mid-swept", 1.90, 0.24, 1.80, 0.46, 35.0, 4, 0.70, 0.60),
    ("quad-aft-straight", 1.70, 0.20, 1.90, 0.60, 12.0, 4, 0.85, 0.80),
    ("twin-long-swept", 1.95, 0.18, 1.60, 0.44, 25.0, 2, 0.55, 0.14),
    ("quad-long-aft", 1.95, 0.26, 1.95, 0.52, 38.0, 4, 0.80, 0.47),
]
DEFAULT_HOLDOUT = (4, 5)
# images per category for each (modality, split)
DEFAULT_COUNTS = {("sar", "train"): 50, ("sar", "test"): 10, ("opt", "train"): 50, ("opt", "test"): 10}


def default_catalog(image_size: int = 64, max_jitter: float = 1.0) -> list[AircraftSpec]:
    unit = [AircraftSpec(i, name, L, W, S, wp, sw, e, ts, hue)
            for i, (name, L, W, S, wp, sw, e, ts, hue) in enumerate(_CATALOG)]
    # common scale so the widest airframe at any heading just fits the usable radius
    reach = max(np.hypot(*np.concatenate([q for v in _local_parts(a)[0].values() for q in v]).T).max()
                for a in unit)
    r = (image_size / 2.0 - MARGIN - max_jitter - 0.5) / reach
    return [replace(a, fuselage_length=a.fuselage_length * r, fuselage_width=a.fuselage_width * r,
                    wingspan=a.wingspan * r, tail_span=a.tail_span * r) for a in unit]


# --------------------------------------------------------------------------- geometry

@dataclass
class Geometry:
    polygons: dict[str, list[np.ndarray]]  # part name -> list of (N, 2) arrays in (u, v)
    keypoints: KeypointAnnotation
    corners: np.ndarray  # (K, 2) scatterer positions
    theta_deg: float
    image_size: int
    spec: AircraftSpec


def _local_parts(spec: AircraftSpec) -> tuple[dict[str, list[np.ndarray]], np.ndarray]:
    """Polygons in the aircraft frame: x toward the nose, y to port (left of heading)."""
    L, W, S = spec.fuselage_length, spec.fuselage_width, spec.wingspan
    nose, tail = L / 2.0, -L / 2.0
    fus = np.array([
        [nose, 0.0], [nose - 1.2 * W, W / 2], [tail + 0.6 * W, W / 2],
        [tail, 0.0], [tail + 0.6 * W, -W / 2], [nose - 1.2 * W, -W / 2],
    ])
    tan_sw = math.tan(math.radians(spec.wing_sweep_deg))
    root_le = nose - spec.wing_position * L
    root_chord = 0.28 * L
    tip_chord = 0.10 * L
    half = S / 2.0
    tip_le = root_le - (half - W / 2) * tan_sw
    wings = []
    for sgn in (1, -1):
        wings.append(np.array([
            [root_le, sgn * W / 2], [tip_le, sgn * half],
            [tip_le - tip_chord, sgn * half], [root_le - root_chord, sgn * W / 2],
        ]))
    tail_root = tail + 0.18 * L
    th = spec.tail_span / 2.0
    tail_tip = tail_root - (th - W / 2) * tan_sw * 0.8
    tails = []
    for sgn in (1, -1):
        tails.append(np.array([
            [tail_root, sgn * W / 2], [tail_tip, sgn * th],
            [tail_tip - 0.05 * L, sgn * th], [tail_root - 0.12 * L, sgn * W / 2],
        ]))
    fracs = (0.35,) if spec.engine_count == 2 else (0.28, 0.62)
    eng_len, eng_w = 0.12 * L, 0.55 * W
    engines, eng_centres = [], []
    for f in fracs:
        y = W / 2 + f * (half - W / 2)
        x_le = root_le - (y - W / 2) * tan_sw + 0.35 * eng_len
        for sgn in (1, -1):
            engines.append(np.array([
                [x_le, sgn * y - eng_w / 2], [x_le, sgn * y + eng_w / 2],
                [x_le - eng_len, sgn * y + eng_w / 2], [x_le - eng_len, sgn * y - eng_w / 2],
            ]))
            eng_centres.append([x_le - eng_len / 2, sgn * y])
    corners = np.array(
        [[nose, 0.0], [tail, 0.0],
         [root_le, W / 2], [root_le, -W / 2],
         [tip_le - tip_chord / 2, half], [tip_le - tip_chord / 2, -half],
         [tail_tip - 0.025 * L, th], [tail_tip - 0.025 * L, -th]]
        + eng_centres
    )
    parts = {"fuselage": [fus], "wings": wings, "tail": tails, "engines": engines}
    return parts, corners


def _to_image(p: np.ndarray, theta_deg: float, centre: tuple[float, float]) -> np.ndarray:
    a = math.radians(theta_deg)
    c, s = math.cos(a), math.sin(a)
    x, y = p[:, 0], p[:, 1]
    return np.stack([centre[0] + c * x - s * y, centre[1] - (s * x + c * y)], axis=1)


def generate_geometry(spec: AircraftSpec, theta_deg: float, rng: np.random.Generator | None,
                      image_size: int = 64, max_jitter: float = 1.0) -> Geometry:
    """Place ``spec`` at heading ``theta_deg`` near the canvas centre."""
    jitter = rng.uniform(-max_jitter, max_jitter, size=2) if rng is not None else np.zeros(2)
    c0 = (image_size - 1) / 2.0
    centre = (c0 + float(jitter[0]), c0 + float(jitter[1]))
    parts, corners = _local_parts(spec)
    polys = {k: [_to_image(p, theta_deg, centre) for p in v] for k, v in parts.items()}
    allpts = np.concatenate([p for v in polys.values() for p in v])
    if allpts.min() < MARGIN or allpts.max() > image_size - 1 - MARGIN:
        raise ValueError(f"aircraft {spec.name!r} overflows a {image_size}px canvas")
    ends = _to_image(np.array([[spec.fuselage_length / 2, 0.0], [-spec.fuselage_length / 2, 0.0]]),
                     theta_deg, centre)
    kp = KeypointAnnotation(tuple(map(float, ends[0])), tuple(map(float, ends[1])))
    return Geometry(polys, kp, _to_image(corners, theta_deg, centre), theta_deg % 360.0,
                    image_size, spec)


def rasterize(polygons: list[np.ndarray], image_size: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Anti-aliased coverage in [0, 1]: fraction of supersampled cell centres inside any polygon."""
    n = image_size * supersample
    mask = np.zeros((n, n), dtype=bool)
    for p in polygons:
        # pixel (u, v) covers [u - 0.5, u + 0.5); supersampled cell centres line up with that
        q = (p + 0.5) * supersample - 0.5
        rr, cc = draw_polygon(q[:, 1], q[:, 0], shape=(n, n))
        mask[rr, cc] = True
    return mask.reshape(image_size, supersample, image_size, supersample).mean(axis=(1, 3))


def coverage(geom: Geometry, supersample: int = SUPERSAMPLE) -> np.ndarray:
    return rasterize([p for v in geom.polygons.values() for p in v], geom.image_size, supersample)


# --------------------------------------------------------------------------- renderers

def render_optical(geom: Geometry, rng: np.random.Generator) -> np.ndarray:
    """RGB float image in [0, 1], shape (H, W, 3)."""
    n = geom.image_size
    bg = 0.50 + rng.uniform(-0.05, 0.05)
    img = np.full((n, n, 3), bg) * np.array([1.0, 1.0, 0.97])
    hue = (geom.spec.hue + rng.uniform(-0.02, 0.02)) % 1.0
    body = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.95))
    # shading ramp across the airframe, lighter on the port side
    a = math.radians(geom.theta_deg)
    vv, uu = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2.0
    port = -(uu - c) * math.sin(a) - (vv - c) * math.cos(a)
    shade = 1.0 + 0.15 * np.tanh(port / (0.25 * n))
    airframe = rasterize(geom.polygons["fuselage"] + geom.polygons["wings"] + geom.polygons["tail"], n)
    engines = rasterize(geom.polygons["engines"], n)
    img = img * (1 - airframe[..., None]) + (body * shade[..., None]) * airframe[..., None]
    img = img * (1 - engines[..., None]) + (0.45 * body) * engines[..., None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gamma_speckle(shape, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative speckle ~ Gamma(looks, 1/looks): mean 1, variance 1/looks."""
    if looks <= 0:
        raise ValueError("looks must be positive")
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def scatter_intensity(geom: Geometry, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noise-free backscatter: one Gaussian blob per structural corner."""
    n = geom.image_size
    img = np.zeros((n, n))
    blob_sigma = max(0.6, n / 64.0)
    amps = rng.uniform(0.6, 1.0, size=len(geom.corners)) if rng is not None else np.ones(len(geom.corners))
    for (u, v), amp in zip(geom.corners, amps):
        iu, iv = int(round(u)), int(round(v))
        if 0 <= iu < n and 0 <= iv < n:
            img[iv, iu] += amp
    img = gaussian_filter(img, blob_sigma) * (2 * math.pi * blob_sigma ** 2)
    # weak diffuse return from the airframe; low enough that no contour survives speckle
    img += 0.10 * gaussian_filter(coverage(geom, 2), 1.0)
    return img


def render_sar(geom: Geometry, rng: np.random.Generator, looks: float = 2.0) -> np.ndarray:
    """Grayscale float image in [0, 1], shape (H, W)."""
    n = geom.image_size
    clutter = 0.08 * gaussian_filter(rng.uniform(0.5, 1.5, size=(n, n)), 1.0)
    img = (scatter_intensity(geom, rng) + clutter) * gamma_speckle((n, n), looks, rng)
    return np.clip(np.sqrt(img / 1.2), 0.0, 1.0)


# --------------------------------------------------------------------------- dataset

def _record_rng(seed: int, modality: str, split: str, cat: int, k: int) -> np.random.Generator:
    key = [seed, MODALITIES.index(modality), SPLITS.index(split), cat, k]
    return np.random.default_rng(np.random.SeedSequence(key))


def save_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, optimize=False)


def build_dataset(out_dir: str | Path, catalog: list[AircraftSpec] | None = None,
                  counts: dict[tuple[str, str], int] | None = None,
                  holdout_categories=DEFAULT_HOLDOUT, seed: int = 0, image_size: int = 64,
                  sar_looks: float = 2.0) -> list[dict]:
    """Write PNG slices plus ``manifest.jsonl`` and ``dataset.json``; return the records.

    ``counts`` maps (modality, split) to images per category. Held-out
    categories are present for detector training but are listed in
    ``dataset.json`` so the diffusion trainer can exclude them.
    """
    catalog = catalog if catalog is not None else default_catalog(image_size)
    ids = [c.category_id for c in catalog]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate category ids in catalog")
    counts = counts or DEFAULT_COUNTS
    for key, n in counts.items():
        if n < 1:
            raise ValueError(f"count for {key} must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for modality in MODALITIES:
        for split in SPLITS:
            for spec in catalog:
                for k in range(counts[(modality, split)]):
                    rng = _record_rng(seed, modality, split, spec.category_id, k)
                    theta = float(rng.uniform(0.0, 360.0))
                    geom = generate_geometry(spec, theta, rng, image_size)
                    img = render_sar(geom, rng, sar_looks) if modality == "sar" else render_optical(geom, rng)
                    rel = f"images/{modality}_{split}_c{spec.category_id}_{k:04d}.png"
                    save_png(out / rel, img)
                    kp = geom.keypoints
                    records.append({
                        "path": rel, "modality": modality, "split": split,
                        "category_id": spec.category_id, "category_name": spec.name,
                        "nose_uv": list(kp.nose_uv), "tail_uv": list(kp.tail_uv),
                        "theta_deg": keypoints_to_angle(kp.nose_uv, kp.tail_uv),
                    })
    write_manifest(out / "manifest.jsonl", records)
    meta = {"image_size": image_size, "seed": seed, "holdout_categories": sorted(holdout_categories),
            "num_classes": len(catalog), "catalog": [asdict(c) for c in catalog]}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    return records


def write_manifest(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=False) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_image(root: str | Path, record: dict) -> np.ndarray:
    """Image as float32 in [-1, 1], shape (C, H, W)."""
    arr = np.asarray(Image.open(Path(root) / record["path"]), dtype=np.float32) / 127.5 - 1.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
