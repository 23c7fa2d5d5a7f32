"""Dataset preparation: page colour classification, panel cropping, manifests, edge maps.

Images are numpy ``uint8`` arrays, ``H x W x 3`` for RGB pages and ``H x W``
for single-channel panels. At the tensor boundary pixel values map to
[-1, 1] via ``v / 127.5 - 1``.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import GeometryError, Rng, Tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
SHAPES = ("circle", "cross", "square", "triangle")


class PageKind(str, enum.Enum):
    BLACK_WHITE = "BlackWhite"
    COLOR = "Color"


# -- IO ---------------------------------------------------------------------------


def load_image(path, mode: str | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if mode is not None:
            im = im.convert(mode)
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def save_png(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(tmp, format="PNG")
    tmp.replace(path)


def to_tensor(img: np.ndarray) -> Tensor:
    """uint8 H x W (x C) image -> C x H x W tensor in [-1, 1]."""
    arr = img.astype(np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return Tensor(arr / np.float32(127.5) - np.float32(1.0))


def from_tensor(x: Tensor | np.ndarray) -> np.ndarray:
    """C x H x W values in [-1, 1] -> uint8 image (H x W for one channel)."""
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    arr = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


# -- classification -----------------------------------------------------------------


def channel_difference(page: np.ndarray) -> int:
    """max over pixels of max(|R - G|, |G - B|)."""
    if page.ndim == 2:
        return 0
    p = page.astype(np.int16)
    rg = np.abs(p[..., 0] - p[..., 1])
    gb = np.abs(p[..., 1] - p[..., 2])
    return int(max(rg.max(), gb.max()))


def classify_page(page: np.ndarray, threshold: int = 10) -> PageKind:
    """Black/white iff the max adjacent-channel difference is <= ``threshold``."""
    if page.ndim not in (2, 3) or page.size == 0:
        raise ValueError(f"not a page image: shape {page.shape}")
    return PageKind.BLACK_WHITE if channel_difference(page) <= threshold else PageKind.COLOR


# -- panel extraction -------------------------------------------------------------------


@dataclass(frozen=True)
class PanelGrid:
    rows: int = 2
    cols: int = 4
    margin_left: int = 0
    margin_right: int = 0
    margin_top: int = 0
    margin_bottom: int = 0
    gutter_x: int = 0
    gutter_y: int = 0

    @classmethod
    def parse(cls, spec: str) -> "PanelGrid":
        """``rows,cols[,margin[,gutter]]`` with one margin for all sides and one gutter for both axes."""
        vals = [int(v) for v in spec.split(",")]
        if len(vals) not in (2, 3, 4):
            raise ValueError(f"grid spec {spec!r} needs rows,cols[,margins[,gutters]]")
        rows, cols = vals[:2]
        m = vals[2] if len(vals) > 2 else 0
        g = vals[3] if len(vals) > 3 else 0
        return cls(rows, cols, m, m, m, m, g, g)

    def panel_size(self, width: int, height: int) -> tuple[int, int]:
        inner_w = width - self.margin_left - self.margin_right - (self.cols - 1) * self.gutter_x
        inner_h = height - self.margin_top - self.margin_bottom - (self.rows - 1) * self.gutter_y
        pw, ph = inner_w // self.cols, inner_h // self.rows
        if self.rows < 1 or self.cols < 1 or pw <= 0 or ph <= 0:
            raise GeometryError(
                f"grid {self.rows}x{self.cols} does not fit a {width}x{height} page "
                f"(content area {inner_w}x{inner_h})"
            )
        return pw, ph

    def boxes(self, width: int, height: int) -> list[tuple[int, int, int, int]]:
        """(x0, y0, x1, y1) boxes in reading order."""
        pw, ph = self.panel_size(width, height)
        out = []
        for r in range(self.rows):
            y0 = self.margin_top + r * (ph + self.gutter_y)
            for c in range(self.cols):
                x0 = self.margin_left + c * (pw + self.gutter_x)
                out.append((x0, y0, x0 + pw, y0 + ph))
        return out


def extract_panels(page: np.ndarray, grid: PanelGrid = PanelGrid()) -> list[np.ndarray]:
    h, w = page.shape[:2]
    return [page[y0:y1, x0:x1].copy() for x0, y0, x1, y1 in grid.boxes(w, h)]


def expected_panel_count(volumes, pages_per_volume, bw_fraction, strips_per_page, panels_per_strip) -> int:
    """floor(volumes * pages * bw_fraction * strips * panels), evaluated exactly."""
    product = Fraction(1)
    for v in (volumes, pages_per_volume, bw_fraction, strips_per_page, panels_per_strip):
        product *= Fraction(v).limit_denominator(10**6) if isinstance(v, float) else Fraction(v)
    return math.floor(product)


@dataclass
class PrepareReport:
    pages: dict[str, str]
    panels: list[str]

    def to_json(self) -> str:
        return json.dumps({"pages": self.pages, "panels": self.panels}, indent=2, sort_keys=True)


def prepare_pages(page_dir, out_dir, threshold: int = 10, grid: PanelGrid = PanelGrid(), grayscale: bool = True) -> PrepareReport:
    """Classify every page, crop B/W pages into panels named ``<stem>_p<i>.png``."""
    page_dir, out_dir = Path(page_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pages: dict[str, str] = {}
    panels: list[str] = []
    for path in sorted(p for p in page_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        page = load_image(path, "RGB")
        kind = classify_page(page, threshold)
        pages[path.name] = kind.value
        if kind is not PageKind.BLACK_WHITE:
            continue
        src = page[..., 1] if grayscale else page
        for i, crop in enumerate(extract_panels(src, grid)):
            dest = out_dir / f"{path.stem}_p{i}.png"
            save_png(crop, dest)
            panels.append(str(dest))
    return PrepareReport(pages, panels)


# -- manifests -------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    records: list[tuple[str, str]]

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"image": p, "caption": c}, ensure_ascii=False) + "\n" for p, c in self.records
        )

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r = json.loads(line)
                    records.append((r["image"], r["caption"]))
        return cls(records)


def build_manifest(panel_dir, caption: str = "CNH3000") -> DatasetManifest:
    """One record per image file in sorted path order, all sharing ``caption``."""
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    paths = sorted(p for p in Path(panel_dir).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        warnings.warn(f"no images found in {panel_dir}; manifest is empty", stacklevel=2)
    return DatasetManifest([(str(p), caption) for p in paths])


# -- edge maps ---------------------------------------------------------------------------


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float64)
    rgb = img[..., :3].astype(np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def edge_map(img: np.ndarray, low: float = 50.0, high: float = 100.0) -> np.ndarray:
    """Binary edge image: black (0) edges on white (255).

    Sobel magnitude is rescaled so its maximum is 255; pixels at or above
    ``high`` are edges, and pixels at or above ``low`` are kept when connected
    to one of them (hysteresis).
    """
    if low > high:
        raise ValueError(f"low threshold {low} exceeds high threshold {high}")
    mag = sobel_magnitude(to_gray(img))
    peak = mag.max()
    out = np.full(mag.shape, 255, dtype=np.uint8)
    if peak <= 0:
        return out
    mag = mag * (255.0 / peak)
    weak = mag >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n:
        keep = np.zeros(n + 1, dtype=bool)
        keep[np.unique(labels[mag >= high])] = True
        keep[0] = False
        out[keep[labels]] = 0
    return out


# -- synthetic corpora ---------------------------------------------------------------------


def _smooth_field(size: int, rng: Rng) -> np.ndarray:
    sigma = 1.0 + 3.0 * float(rng.uniform())
    f = ndimage.gaussian_filter(rng.normal((size, size), dtype=np.float64), sigma, mode="wrap")
    f = (f - f.min()) / max(f.max() - f.min(), 1e-9)
    return np.round(f * 255).astype(np.uint8)


def _draw_shape(size: int, kind: str, rng: Rng) -> np.ndarray:
    img = np.full((size, size), 255, dtype=np.uint8)
    r = size * (0.22 + 0.12 * rng.uniform())
    cx = size / 2 + (rng.uniform() - 0.5) * size * 0.2
    cy = size / 2 + (rng.uniform() - 0.5) * size * 0.2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif kind == "square":
        mask = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif kind == "cross":
        arm = r * 0.3
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    elif kind == "triangle":
        top, base = cy - r, cy + r * 0.8
        frac = (yy - top) / (base - top)
        mask = (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * r)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    img[mask] = 0
    return img


def shape_label(i: int) -> str:
    """Class of item ``i`` of a ``shape_panels`` corpus (classes cycle in SHAPES order)."""
    return SHAPES[i % len(SHAPES)]


def _bw_page(rng: Rng, width: int, height: int, grid: PanelGrid) -> np.ndarray:
    page = np.full((height, width), 250, dtype=np.int16)
    for x0, y0, x1, y1 in grid.boxes(width, height):
        page[y0 : y0 + 2, x0:x1] = 3
        page[y1 - 2 : y1, x0:x1] = 3
        page[y0:y1, x0 : x0 + 2] = 3
        page[y0:y1, x1 - 2 : x1] = 3
        for _ in range(3):
            sx0 = x0 + rng.randint(4, max(5, (x1 - x0) // 2))
            sy0 = y0 + rng.randint(4, max(5, (y1 - y0) // 2))
            sw = rng.randint(2, max(3, (x1 - sx0) - 4))
            sh = rng.randint(2, max(3, (y1 - sy0) - 4))
            page[sy0 : sy0 + sh, sx0 : sx0 + 2] = 3
            page[sy0 : sy0 + 2, sx0 : sx0 + sw] = 3
    page = page + (rng.integers(0, 5, page.shape) - 2)
    rgb = np.repeat(page[..., None], 3, axis=2)
    rgb = rgb + rng.integers(-2, 3, rgb.shape)  # scanner jitter, well under the threshold
    return np.clip(rgb, 0, 255).astype(np.uint8)


def _color_page(rng: Rng, width: int, height: int) -> np.ndarray:
    page = np.full((height, width, 3), 245, dtype=np.int16)
    for _ in range(6):
        x0, y0 = rng.randint(0, width - 8), rng.randint(0, height - 8)
        x1, y1 = x0 + rng.randint(4, width // 3), y0 + rng.randint(4, height // 3)
        color = rng.integers(0, 256, (3,))
        color[rng.randint(0, 3)] = 255
        color[rng.randint(0, 3)] = 0
        page[y0:y1, x0:x1] = color
    return np.clip(page, 0, 255).astype(np.uint8)


def generate_synthetic_corpus(
    kind: str, n: int, seed: int = 0, width: int = 200, height: int = 300, panel_size: int = 32
) -> list[np.ndarray]:
    """Deterministic fixture images.

    ``bw_pages``: near-binary grayscale RGB pages with 2x4 panel borders.
    ``color_pages``: RGB pages with saturated colour blocks.
    ``shape_panels``: ``panel_size``-square single-channel black shapes on white,
    classes cycling through :data:`SHAPES`.
    ``smooth_fields``: ``panel_size``-square blurred Gaussian noise stretched to
    [0, 255]; a generic corpus for pretraining a base model.
    """
    rng = Rng(seed)
    if kind == "bw_pages":
        grid = PanelGrid()
        return [_bw_page(rng, width, height, grid) for _ in range(n)]
    if kind == "color_pages":
        return [_color_page(rng, width, height) for _ in range(n)]
    if kind == "shape_panels":
        return [_draw_shape(panel_size, shape_label(i), rng) for i in range(n)]
    if kind == "smooth_fields":
        return [_smooth_field(panel_size, rng) for _ in range(n)]
    raise ValueError(f"unknown corpus kind {kind!r}")
