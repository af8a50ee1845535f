"""Procedural fundus-like images with known, confounded factors of variation.

Each image is rendered from a :class:`FactorVector`:

* ``attribute_class`` sets the pigmentation band of the fundus and the
  strength of a reflective sheen along the vessels,
* ``camera_class`` applies a smooth multiplicative field (channel tint,
  brightness and a radial vignette),
* ``identity_seed`` and ``continuous_nuisance`` place the optic disc and grow
  a branching vessel tree.

The camera is drawn from the attribute through :class:`ConfoundSpec`, which
mixes a deterministic attribute-to-camera mapping with a uniform draw.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, PreprocessingError

RESOLUTIONS = (32, 64, 128, 256)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
# fundus circle radius as a fraction of the half-width of the image
FUNDUS_RADIUS = 0.92
FACTOR_NAMES = ("attribute", "camera")
NUISANCE_DIM = 4

# pigmentation (RGB reflectance) and sheen amplitude per attribute class
_PIGMENT = np.array([
    [0.86, 0.50, 0.24],
    [0.78, 0.36, 0.22],
    [0.62, 0.26, 0.20],
    [0.70, 0.44, 0.30],
    [0.55, 0.33, 0.26],
])
_SHEEN = np.array([0.45, 0.2, 0.0, 0.3, 0.1])

# channel gain, brightness and vignette strength per camera class
_CAMERA_GAIN = np.array([
    [1.00, 0.85, 0.70],
    [0.80, 0.95, 1.00],
    [1.00, 1.00, 0.85],
    [0.90, 0.75, 1.00],
    [0.75, 1.00, 0.80],
    [1.00, 0.70, 0.85],
    [0.85, 0.90, 0.70],
])
_CAMERA_BRIGHTNESS = np.array([0.95, 0.80, 1.05, 0.70, 0.88, 1.00, 0.78])
_CAMERA_VIGNETTE = np.array([0.25, 0.55, 0.05, 0.40, 0.15, 0.50, 0.30])


@dataclass(frozen=True)
class FactorVector:
    attribute_class: int
    camera_class: int
    identity_seed: int
    continuous_nuisance: tuple[float, ...] = (0.0,) * NUISANCE_DIM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["continuous_nuisance"] = list(self.continuous_nuisance)
        return d


@dataclass
class ConfoundSpec:
    correlation_strength: float = 0.0
    attribute_prior: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    camera_prior: tuple[float, ...] = (0.2,) * 5

    def __post_init__(self):
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ConfigError("correlation_strength must lie in [0, 1]")
        for name in ("attribute_prior", "camera_prior"):
            prior = np.asarray(getattr(self, name), dtype=float)
            if prior.ndim != 1 or (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be a probability vector, got {prior.tolist()}")
            if (prior > 0).sum() < 2:
                raise ConfigError(f"{name} is degenerate: fewer than two classes have mass")
        if len(self.attribute_prior) > len(_PIGMENT):
            raise ConfigError(f"at most {len(_PIGMENT)} attribute classes are supported")
        if len(self.camera_prior) > len(_CAMERA_GAIN):
            raise ConfigError(f"at most {len(_CAMERA_GAIN)} camera classes are supported")

    @property
    def n_attribute(self) -> int:
        return len(self.attribute_prior)

    @property
    def n_camera(self) -> int:
        return len(self.camera_prior)

    def implied_camera(self, attribute: int) -> int:
        return attribute % self.n_camera


@dataclass
class LabeledImageBatch:
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    labels: dict[str, np.ndarray]
    identity_keys: np.ndarray
    factors: list[FactorVector] = field(default_factory=list)

    def __len__(self):
        return len(self.identity_keys)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "LabeledImageBatch":
        index = np.asarray(index)
        return LabeledImageBatch(
            self.images[index],
            {k: v[index] for k, v in self.labels.items()},
            self.identity_keys[index],
            [self.factors[i] for i in index] if self.factors else [],
        )


def _check_resolution(resolution):
    if resolution not in RESOLUTIONS:
        raise ConfigError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")


def _grid(resolution):
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")


def _segment_distance(px, py, segments):
    """Distance from every pixel to its nearest segment, plus that segment's index."""
    best = np.full(px.shape, np.inf)
    which = np.zeros(px.shape, dtype=int)
    for k, (x0, y0, x1, y1, _) in enumerate(segments):
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy + 1e-12), 0.0, 1.0)
        dist = np.hypot(px - x0 - t * dx, py - y0 - t * dy)
        closer = dist < best
        best[closer] = dist[closer]
        which[closer] = k
    return best, which


def vessel_tree(identity_seed: int, disc_xy, depth: int = 4):
    """Recursive binary branching from the optic disc; returns (x0, y0, x1, y1, width) segments."""
    rng = np.random.default_rng(identity_seed)
    segments = []

    def grow(x, y, angle, length, width, level):
        x1, y1 = x + length * math.cos(angle), y + length * math.sin(angle)
        segments.append((x, y, x1, y1, width))
        if level == depth:
            return
        spread = rng.uniform(0.35, 0.75)
        for sign in (-1.0, 1.0):
            grow(x1, y1, angle + sign * spread + rng.normal(0, 0.15),
                 length * rng.uniform(0.6, 0.85), width * 0.72, level + 1)

    dx, dy = disc_xy
    for base in (-0.55, 0.55):
        grow(dx, dy, base + rng.normal(0, 0.12), rng.uniform(0.35, 0.5), 0.06, 1)
    return segments


def _base_layers(factors: FactorVector, resolution: int):
    """Camera-independent reflectance image and its vessel mask."""
    px, py = _grid(resolution)
    nuisance = np.asarray(factors.continuous_nuisance, dtype=float)
    disc = (-0.5 + 0.08 * nuisance[0], 0.08 * nuisance[1])
    segments = vessel_tree(factors.identity_seed, disc)
    dist, which = _segment_distance(px, py, segments)
    widths = np.array([s[4] for s in segments])[which]
    # soft-edged vessels; width never drops below a pixel so they survive downsampling
    half_width = np.maximum(widths / 2, 1.0 / resolution)
    vessel = np.clip(1.5 - dist / half_width, 0.0, 1.0)
    sheen_band = np.exp(-((dist - 2.2 * half_width) / (1.5 * half_width)) ** 2) * (widths > 0.03)

    attr = factors.attribute_class
    pigment = _PIGMENT[attr] * (1.0 + 0.05 * nuisance[2])
    r = np.hypot(px, py)
    shade = 1.0 - 0.25 * (r / FUNDUS_RADIUS) ** 2
    image = pigment[:, None, None] * shade[None]
    # macula: darker spot temporal to the disc
    macula = np.exp(-(((px - 0.25) ** 2 + (py - 0.05 * nuisance[3]) ** 2) / 0.02))
    image = image * (1.0 - 0.35 * macula)[None]
    optic = np.exp(-(((px - disc[0]) ** 2 + (py - disc[1]) ** 2) / 0.012))
    image = image + optic[None] * (np.array([0.95, 0.9, 0.65])[:, None, None] - image)
    image = image + _SHEEN[attr] * sheen_band[None] * (1.0 - image)
    image = image * (1.0 - 0.55 * vessel)[None] * np.array([1.0, 0.7, 0.8])[:, None, None] ** vessel[None]
    return image, vessel > 0.5


def camera_field(camera_class: int, resolution: int) -> np.ndarray:
    """Smooth multiplicative (3, H, W) field of one camera."""
    px, py = _grid(resolution)
    r = np.hypot(px, py) / FUNDUS_RADIUS
    vignette = 1.0 - _CAMERA_VIGNETTE[camera_class] * r ** 2
    gain = _CAMERA_GAIN[camera_class] * _CAMERA_BRIGHTNESS[camera_class]
    return gain[:, None, None] * vignette[None]


def fundus_mask(resolution: int) -> np.ndarray:
    px, py = _grid(resolution)
    return np.hypot(px, py) < FUNDUS_RADIUS


def render_image(factors: FactorVector, resolution: int = 32) -> np.ndarray:
    """Render one (3, H, W) float32 image in [0, 1]; pixels outside the fundus are 0."""
    _check_resolution(resolution)
    if factors.attribute_class >= len(_PIGMENT) or factors.camera_class >= len(_CAMERA_GAIN):
        raise ConfigError(f"class index out of range in {factors}")
    base, _ = _base_layers(factors, resolution)
    image = np.clip(base * camera_field(factors.camera_class, resolution), 0.0, 1.0)
    image *= fundus_mask(resolution)[None]
    return image.astype(np.float32)


def vessel_mask(factors: FactorVector, resolution: int = 32) -> np.ndarray:
    _check_resolution(resolution)
    return _base_layers(factors, resolution)[1] & fundus_mask(resolution)


def detect_vessels(image: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Vessel pixels read off a rendered image.

    Works on the log of the channel geometric mean, where a camera's channel
    gains become one additive constant and its smooth vignette a slowly varying
    term.  Dark valleys (a negative discrete Laplacian below ``-threshold``)
    count as vessel.
    """
    log_lum = np.log(np.maximum(np.asarray(image, dtype=np.float64), 1e-4)).mean(axis=0)
    valley = ndimage.laplace(log_lum) > threshold
    inside = ndimage.binary_erosion(fundus_mask(log_lum.shape[-1]))
    return valley & inside


def sample_factors(n: int, confound: ConfoundSpec, seed: int, images_per_identity: int = 2) -> list[FactorVector]:
    """Draw ground-truth factors; consecutive images share an identity."""
    rng = np.random.default_rng(seed)
    factors = []
    n_ident = -(-n // images_per_identity)
    attributes = rng.choice(confound.n_attribute, size=n_ident, p=confound.attribute_prior)
    identity_seeds = rng.integers(0, 2**31 - 1, size=n_ident)
    nuisance = np.clip(rng.standard_normal((n_ident, NUISANCE_DIM)), -2.5, 2.5)
    for i in range(n):
        ident = i // images_per_identity
        attribute = int(attributes[ident])
        if rng.random() < confound.correlation_strength:
            camera = confound.implied_camera(attribute)
        else:
            camera = int(rng.choice(confound.n_camera, p=confound.camera_prior))
        factors.append(FactorVector(attribute, camera, int(identity_seeds[ident]),
                                    tuple(float(v) for v in nuisance[ident])))
    return factors


def render_batch(factors, resolution: int, identity_keys=None) -> LabeledImageBatch:
    images = np.stack([render_image(f, resolution) for f in factors]) if factors else \
        np.zeros((0, 3, resolution, resolution), np.float32)
    labels = {
        "attribute": np.array([f.attribute_class for f in factors], dtype=np.int64),
        "camera": np.array([f.camera_class for f in factors], dtype=np.int64),
    }
    if identity_keys is None:
        identity_keys = np.array([f.identity_seed for f in factors], dtype=np.int64)
    return LabeledImageBatch(images, labels, np.asarray(identity_keys, dtype=np.int64), list(factors))


def sample_dataset(n: int, confound: ConfoundSpec | None = None, resolution: int = 32,
                   seed: int = 0) -> LabeledImageBatch:
    """Render ``n`` labeled images; ground-truth factors ride along in ``.factors``."""
    confound = confound or ConfoundSpec()
    _check_resolution(resolution)
    if n < 100:
        raise ConfigError("sample_dataset needs n >= 100")
    factors = sample_factors(n, confound, seed)
    keys = np.arange(n) // 2
    return render_batch(factors, resolution, keys)


def split_by_identity(batch: LabeledImageBatch, seed: int = 0,
                      fractions=SPLIT_FRACTIONS) -> dict[str, LabeledImageBatch]:
    """Partition by identity key into train/val/test (default 60/20/20)."""
    keys = np.unique(batch.identity_keys)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)
    bounds = np.round(np.cumsum(fractions) * len(keys)).astype(int)
    groups = np.split(keys, bounds[:-1])
    out = {}
    for name, group in zip(SPLITS, groups):
        index = np.flatnonzero(np.isin(batch.identity_keys, group))
        out[name] = batch.subset(index)
    return out


# on-disk format

def write_dataset(splits: dict[str, LabeledImageBatch], root, spec: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        part = splits[split]
        (root / split).mkdir(exist_ok=True)
        for i in range(len(part)):
            name = f"{split}/{i:06d}.png"
            pixels = np.round(part.images[i].transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(root / name)
            row = {
                "filename": name,
                "split": split,
                "attribute_class": int(part.labels["attribute"][i]),
                "camera_class": int(part.labels["camera"][i]),
                "identity_key": int(part.identity_keys[i]),
            }
            if part.factors:
                f = part.factors[i]
                row["identity_seed"] = f.identity_seed
                row["continuous_nuisance"] = list(f.continuous_nuisance)
            rows.append(row)
    with open(root / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if spec is not None:
        (root / "dataset.json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> dict[str, LabeledImageBatch]:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"no manifest.jsonl in {root}")
    rows = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    out = {}
    for split in SPLITS:
        part = [r for r in rows if r["split"] == split]
        if not part:
            continue
        images = np.stack([
            np.asarray(Image.open(root / r["filename"]).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
            for r in part
        ])
        factors = []
        if all("identity_seed" in r for r in part):
            factors = [FactorVector(r["attribute_class"], r["camera_class"], r["identity_seed"],
                                    tuple(r["continuous_nuisance"])) for r in part]
        out[split] = LabeledImageBatch(
            images,
            {"attribute": np.array([r["attribute_class"] for r in part]),
             "camera": np.array([r["camera_class"] for r in part])},
            np.array([r["identity_key"] for r in part]),
            factors,
        )
    return out


# external images

def _to_float_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise PreprocessingError(f"expected an RGB image, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    if arr.shape[-1] != 3:
        raise PreprocessingError(f"expected 3 channels, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if arr.max() > 1.0:
        arr = arr / 255.0
    return arr


def preprocess_external(image, resolution: int = 32, threshold: float = 0.04) -> np.ndarray:
    """Crop to the fundus circle, resize, mask, and put the optic disc on the left.

    ``image`` is H x W x 3 (or 3 x H x W), uint8 or float in [0, 1].  Returns
    a (3, resolution, resolution) float32 array.
    """
    _check_resolution(resolution)
    rgb = _to_float_rgb(image)
    lum = rgb.mean(axis=-1)
    fg = lum > threshold
    if fg.sum() < 0.01 * fg.size:
        raise PreprocessingError("no bright circular region found")
    rows, cols = np.flatnonzero(fg.any(axis=1)), np.flatnonzero(fg.any(axis=0))
    cy, cx = (rows[0] + rows[-1] + 1) / 2.0, (cols[0] + cols[-1] + 1) / 2.0
    radius = max(rows[-1] + 1 - rows[0], cols[-1] + 1 - cols[0]) / 2.0
    half = radius / FUNDUS_RADIUS
    top, left = int(round(cy - half)), int(round(cx - half))
    size = int(round(2 * half))
    canvas = np.zeros((size, size, 3))
    src_r = slice(max(top, 0), min(top + size, rgb.shape[0]))
    src_c = slice(max(left, 0), min(left + size, rgb.shape[1]))
    canvas[src_r.start - top:src_r.stop - top, src_c.start - left:src_c.stop - left] = rgb[src_r, src_c]
    if size != resolution:
        pil = Image.fromarray(np.round(canvas * 255).astype(np.uint8))
        canvas = np.asarray(pil.resize((resolution, resolution), Image.BILINEAR), dtype=np.float64) / 255.0
    out = canvas.transpose(2, 0, 1) * fundus_mask(resolution)[None]
    if optic_disc_side(out) == "right":
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def optic_disc_side(image: np.ndarray) -> str:
    """'left' or 'right' from the centroid of the brightest large blob."""
    lum = np.asarray(image).mean(axis=0)
    inside = lum[fundus_mask(lum.shape[-1])]
    if inside.size == 0 or inside.max() <= 0:
        return "left"
    bright = lum >= np.quantile(inside, 0.97)
    labels, count = ndimage.label(bright)
    if count == 0:
        return "left"
    sizes = ndimage.sum(bright, labels, range(1, count + 1))
    blob = labels == (int(np.argmax(sizes)) + 1)
    centroid_x = np.argwhere(blob)[:, 1].mean()
    return "left" if centroid_x < (lum.shape[-1] - 1) / 2.0 else "right"
