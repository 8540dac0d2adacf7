"""Patch application A(patch, image, params) and the scene-level transforms.

Images are float64 arrays shaped (H, W, 3) with values in [0, 1]. The warp
and the colour kernels are written once in torch so patch optimisation and
the calibrator can differentiate through them; the numpy entry points below
wrap the same code.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from errors import PatchbenchError, ValidationError

log = logging.getLogger(__name__)

MIN_PATCH_SIDE = 8
MAX_SCALE      = 0.5
MAX_ROTATION   = 90.0
PATCH_KINDS    = ("global", "local", "control")

# Rec. 709 weights, shared by saturation and illuminance
LUMA = (0.2126, 0.7152, 0.0722)


class InvalidImage(ValidationError):
    pass


class InvalidParams(ValidationError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DimensionMismatch(ValidationError):
    pass


class NonPositiveFactor(ValidationError):
    pass


class DegenerateWarp(PatchbenchError):
    pass


class OutOfFrame(PatchbenchError):
    pass


def check_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidImage(f"expected an HxWx3 image, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidImage("pixel values must lie in [0, 1]")
    return arr


def to_tensor(image: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) float64 array clamped to [0, 1]."""
    arr = t.detach().cpu().to(torch.float64).numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)


@dataclass(eq=False)
class Patch:
    pixels: np.ndarray
    kind: str = "global"
    detector_id: str = ""
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        px = check_image(self.pixels)
        if px.shape[0] != px.shape[1]:
            raise InvalidImage(f"patch must be square, got {px.shape[1]}x{px.shape[0]}")
        if px.shape[0] < MIN_PATCH_SIDE:
            raise InvalidImage(f"patch side {px.shape[0]} is below {MIN_PATCH_SIDE}")
        if self.kind not in PATCH_KINDS:
            raise ValidationError(f"unknown patch kind {self.kind!r}")
        self.pixels = px

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class TransformParams:
    position: tuple[float, float] = (0.5, 0.5)
    scale: float = 0.25
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    brightness_factor: float = 1.0
    contrast_factor: float = 1.0
    hue_shift: float = 0.0
    saturation_factor: float = 1.0
    lowpass_size: int = 0
    color_count: int = 0
    focal: Optional[float] = None   # pixels; None -> image width

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        if len(self.position) != 2 or not all(0.0 <= v <= 1.0 for v in self.position):
            raise InvalidParams("position", f"{self.position} must lie in [0, 1]^2")
        if not 0.0 < self.scale <= MAX_SCALE:
            raise InvalidParams("scale", f"{self.scale} must lie in (0, {MAX_SCALE}]")
        if len(self.rotation) != 3 or not all(-MAX_ROTATION <= v <= MAX_ROTATION for v in self.rotation):
            raise InvalidParams("rotation", f"{self.rotation} must lie in [-90, 90] per axis")
        if self.brightness_factor <= 0:
            raise InvalidParams("brightness_factor", "must be > 0")
        if self.contrast_factor <= 0:
            raise InvalidParams("contrast_factor", "must be > 0")
        if not -180.0 <= self.hue_shift <= 180.0:
            raise InvalidParams("hue_shift", "must lie in [-180, 180]")
        if self.saturation_factor < 0:
            raise InvalidParams("saturation_factor", "must be >= 0")
        if int(self.lowpass_size) != self.lowpass_size or self.lowpass_size < 0:
            raise InvalidParams("lowpass_size", "must be an integer >= 0")
        if int(self.color_count) != self.color_count or self.color_count < 0:
            raise InvalidParams("color_count", "must be an integer >= 0")
        if self.focal is not None and self.focal <= 0:
            raise InvalidParams("focal", "must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position"] = list(self.position)
        d["rotation"] = list(self.rotation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise InvalidParams(unknown[0], "unknown transform field")
        if "position" in known:
            known["position"] = tuple(known["position"])
        if "rotation" in known:
            known["rotation"] = tuple(known["rotation"])
        return cls(**known)


@dataclass(eq=False)
class WarpedPatch:
    rgba: np.ndarray        # (H, W, 4)
    footprint: np.ndarray   # (4, 2) projected corners, clockwise from top-left


@dataclass(frozen=True)
class ColorParams:
    brightness_factor: float = 1.0
    contrast_factor: float = 1.0
    hue_shift: float = 0.0
    saturation_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.brightness_factor < 2.0:
            raise InvalidParams("brightness_factor", "must lie in (0, 2)")
        if not 0.0 < self.contrast_factor < 2.0:
            raise InvalidParams("contrast_factor", "must lie in (0, 2)")
        if not -180.0 <= self.hue_shift <= 180.0:
            raise InvalidParams("hue_shift", "must lie in [-180, 180]")
        if self.saturation_factor < 0:
            raise InvalidParams("saturation_factor", "must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.brightness_factor == 1.0 and self.contrast_factor == 1.0
                and self.hue_shift % 360.0 == 0.0 and self.saturation_factor == 1.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.brightness_factor, self.contrast_factor, self.hue_shift, self.saturation_factor)

    def to_dict(self) -> dict:
        return asdict(self)


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rz @ Ry @ Rx, angles in degrees. x right, y down, z into the scene."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def patch_homography(side: int, params: TransformParams, frame: tuple[int, int]) -> np.ndarray:
    """3x3 map from patch pixel coordinates to image pixel coordinates.

    The patch is a square plane at depth `focal` in front of a pinhole
    camera, so at zero rotation one world unit projects to one pixel and the
    projected side is exactly scale * W.
    """
    h, w = frame
    rx, ry, rz = params.rotation
    if abs(rx) >= MAX_ROTATION or abs(ry) >= MAX_ROTATION:
        raise DegenerateWarp(f"rotation {params.rotation} shows the patch plane edge-on")
    f = float(params.focal) if params.focal else float(w)
    k = params.scale * w / side
    R = rotation_matrix(rx, ry, rz)
    cx, cy = params.position
    T = np.array([cx * w - w / 2.0, cy * h - h / 2.0, f])
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    M = np.column_stack([R[:, 0] * k, R[:, 1] * k, T - (R[:, 0] + R[:, 1]) * k * side / 2.0])
    depths = M[2] @ np.array([[0, side, side, 0], [0, 0, side, side], [1, 1, 1, 1]], dtype=float)
    if np.any(depths <= 1e-9):
        raise DegenerateWarp("part of the patch falls behind the camera")
    return K @ M


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homo = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return homo[:, :2] / homo[:, 2:3]


def footprint_of(side: int, params: TransformParams, frame: tuple[int, int]) -> np.ndarray:
    H = patch_homography(side, params, frame)
    corners = np.array([[0, 0], [side, 0], [side, side], [0, side]], dtype=float)
    return _project(H, corners)


def quad_area(quad: np.ndarray) -> float:
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def warp_tensor(patch: torch.Tensor, params: TransformParams, frame: tuple[int, int]):
    """Differentiable warp of a (3, P, P) patch tensor into an (H, W) frame.

    Returns (rgb (3, H, W), alpha (1, H, W), footprint (4, 2) ndarray).
    Alpha is binary: 1 where the pixel centre back-projects inside the patch.
    """
    side = patch.shape[-1]
    h, w = frame
    H = patch_homography(side, params, frame)
    quad = _project(H, np.array([[0, 0], [side, 0], [side, side], [0, side]], dtype=float))
    if (quad[:, 0].max() <= 0 or quad[:, 0].min() >= w
            or quad[:, 1].max() <= 0 or quad[:, 1].min() >= h):
        raise OutOfFrame(f"patch footprint at {params.position} lies outside the {w}x{h} frame")

    Hinv = torch.from_numpy(np.linalg.inv(H)).to(patch.dtype)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=patch.dtype) + 0.5,
        torch.arange(w, dtype=patch.dtype) + 0.5,
        indexing="ij",
    )
    pix = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1) @ Hinv.T
    front = pix[..., 2] > 0
    denom = torch.where(front, pix[..., 2], torch.ones_like(pix[..., 2]))
    a = pix[..., 0] / denom
    b = pix[..., 1] / denom
    inside = front & (a >= 0) & (a < side) & (b >= 0) & (b < side)

    grid = torch.stack([a / side * 2 - 1, b / side * 2 - 1], dim=-1).unsqueeze(0)
    grid = torch.where(inside.unsqueeze(0).unsqueeze(-1), grid, torch.zeros_like(grid))
    rgb = F.grid_sample(patch.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=False)[0]
    alpha = inside.to(patch.dtype).unsqueeze(0)
    return rgb * alpha, alpha, quad


def composite_tensor(image: torch.Tensor, rgb: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return alpha * rgb + (1 - alpha) * image


def apply_patch_tensor(image: torch.Tensor, patch: torch.Tensor, params: TransformParams) -> torch.Tensor:
    rgb, alpha, _ = warp_tensor(patch, params, (image.shape[-2], image.shape[-1]))
    return composite_tensor(image, rgb, alpha)


def warp_patch(patch: Patch, params: TransformParams, frame: tuple[int, int]) -> WarpedPatch:
    rgb, alpha, quad = warp_tensor(to_tensor(patch.pixels), params, frame)
    rgba = torch.cat([rgb, alpha], dim=0).numpy().transpose(1, 2, 0)
    return WarpedPatch(rgba=np.ascontiguousarray(rgba), footprint=quad)


def composite_patch(image: np.ndarray, warped: WarpedPatch) -> np.ndarray:
    image = check_image(image)
    if warped.rgba.shape[:2] != image.shape[:2]:
        raise DimensionMismatch(
            f"warped layer is {warped.rgba.shape[1]}x{warped.rgba.shape[0]}, "
            f"image is {image.shape[1]}x{image.shape[0]}")
    alpha = warped.rgba[..., 3:4]
    return alpha * warped.rgba[..., :3] + (1.0 - alpha) * image


def apply_patch(image: np.ndarray, patch: Patch, params: TransformParams) -> np.ndarray:
    """Warp then composite. Scene-level fields of params are ignored here."""
    image = check_image(image)
    return composite_patch(image, warp_patch(patch, params, image.shape[:2]))


def rgb_to_hsv_tensor(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb.unbind(-3)
    maxc = rgb.amax(dim=-3)
    minc = rgb.amin(dim=-3)
    delta = maxc - minc
    has_chroma = delta > 0
    safe_delta = torch.where(has_chroma, delta, torch.ones_like(delta))
    safe_max = torch.where(maxc > 0, maxc, torch.ones_like(maxc))
    s = torch.where(maxc > 0, delta / safe_max, torch.zeros_like(delta))
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = torch.where(r == maxc, bc - gc, torch.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(has_chroma, torch.remainder(h / 6.0, 1.0), torch.zeros_like(h))
    return torch.stack([h, s, maxc], dim=-3)


def hsv_to_rgb_tensor(hsv: torch.Tensor) -> torch.Tensor:
    h, s, v = hsv.unbind(-3)
    out = []
    for n in (5.0, 3.0, 1.0):
        k = torch.remainder(n + h * 6.0, 6.0)
        ramp = torch.clamp(torch.minimum(k, 4.0 - k), 0.0, 1.0)
        out.append(v - v * s * ramp)
    return torch.stack(out, dim=-3)


def _per_item(value, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch-item value against `like`."""
    t = torch.as_tensor(value, dtype=like.dtype, device=like.device)
    while t.dim() < like.dim():
        t = t.unsqueeze(-1)
    return t


def shift_hue_tensor(rgb: torch.Tensor, degrees) -> torch.Tensor:
    hsv = rgb_to_hsv_tensor(rgb)
    d = _per_item(degrees, hsv[..., 0, :, :]) / 360.0
    h = torch.remainder(hsv[..., 0, :, :] + d, 1.0)
    return hsv_to_rgb_tensor(torch.stack([h, hsv[..., 1, :, :], hsv[..., 2, :, :]], dim=-3)).clamp(0, 1)


def luminance_tensor(rgb: torch.Tensor) -> torch.Tensor:
    r, g, b = rgb.unbind(-3)
    return (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).unsqueeze(-3)


def apply_color_params_tensor(rgb: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Brightness -> contrast (pivot 0.5) -> saturation -> hue, clamped per stage.

    `params` has shape (..., 4) matching rgb's leading dims. Differentiable in
    both arguments.
    """
    b, c, hue, s = params.unbind(-1)
    out = (rgb * _per_item(b, rgb)).clamp(0, 1)
    out = ((out - 0.5) * _per_item(c, rgb) + 0.5).clamp(0, 1)
    gray = luminance_tensor(out)
    out = (gray + _per_item(s, rgb) * (out - gray)).clamp(0, 1)
    return shift_hue_tensor(out, hue)


def adjust_brightness(image: np.ndarray, factor: float, clip: bool = True) -> np.ndarray:
    """Multiply every channel by `factor` in display-encoded space.

    With `clip` the result saturates at 1.0 like a fixed-exposure sensor.
    Without it the result is still clamped whenever it leaves [0, 1], since an
    Image never holds values outside that range; scene_tensor is the
    non-saturating path a detector can be fed.
    """
    if factor <= 0:
        raise NonPositiveFactor(f"brightness factor {factor} must be > 0")
    image = check_image(image)
    if factor == 1.0:
        return image.copy()
    out = image * factor
    if not clip and out.max() > 1.0:
        log.debug("brightness x%.3f saturates %.2f%% of values", factor, 100 * clipped_fraction(image, factor))
    return np.clip(out, 0.0, 1.0)


def clipped_fraction(image: np.ndarray, factor: float) -> float:
    return float(np.mean(np.asarray(image) * factor > 1.0))


def shift_hue(image: np.ndarray, degrees: float) -> np.ndarray:
    image = check_image(image)
    if degrees % 360.0 == 0.0:
        return image.copy()
    return to_image(shift_hue_tensor(to_tensor(image), float(degrees)))


def _color_stages(image: np.ndarray, brightness: float, contrast: float,
                  hue: float, saturation: float) -> np.ndarray:
    # identity stages are skipped so identity parameters are bit-exact
    if brightness == 1.0 and contrast == 1.0 and saturation == 1.0 and hue % 360.0 == 0.0:
        return image.copy()
    t = to_tensor(image)
    if brightness != 1.0:
        t = (t * brightness).clamp(0, 1)
    if contrast != 1.0:
        t = ((t - 0.5) * contrast + 0.5).clamp(0, 1)
    if saturation != 1.0:
        gray = luminance_tensor(t)
        t = (gray + saturation * (t - gray)).clamp(0, 1)
    if hue % 360.0 != 0.0:
        t = shift_hue_tensor(t, hue)
    return to_image(t)


def apply_color_params(image: np.ndarray, cp: ColorParams) -> np.ndarray:
    return _color_stages(check_image(image), *cp.as_tuple())


def kernel_side(size: int) -> int:
    if size <= 1:
        return 1
    return size if size % 2 else size + 1


def low_pass(image: np.ndarray, size: int) -> np.ndarray:
    """Box blur with an odd square kernel, edges reflected."""
    if size < 0:
        raise ValidationError(f"low-pass size {size} must be >= 0")
    image = check_image(image)
    k = kernel_side(int(size))
    if k == 1 or np.all(image == image[0, 0]):
        return image.copy()
    out = ndimage.uniform_filter(image, size=(k, k, 1), mode="reflect")
    return np.clip(out, 0.0, 1.0)


def _median_cut(colors: np.ndarray, counts: np.ndarray, k: int) -> np.ndarray:
    """Split the widest box at its weighted median until k boxes exist.

    Ties go to the earlier box, then to channel order R, G, B.
    """
    def span(idx):
        if len(idx) < 2:
            return 0.0, 0
        rng = np.ptp(colors[idx], axis=0)
        ch = int(np.argmax(rng))
        return float(rng[ch]), ch

    boxes = [np.arange(len(colors))]
    spans = [span(boxes[0])]
    while len(boxes) < k:
        widths = [s for s, _ in spans]
        i = int(np.argmax(widths))
        if widths[i] <= 0.0:
            break
        ch = spans[i][1]
        idx = boxes[i]
        order = idx[np.argsort(colors[idx, ch], kind="stable")]
        cum = np.cumsum(counts[order])
        cut = int(np.searchsorted(cum, cum[-1] / 2.0)) + 1
        cut = min(max(cut, 1), len(order) - 1)
        lo, hi = order[:cut], order[cut:]
        boxes[i:i + 1] = [lo, hi]
        spans[i:i + 1] = [span(lo), span(hi)]
    return np.array([np.average(colors[idx], axis=0, weights=counts[idx]) for idx in boxes])


def quantize_colors(image: np.ndarray, k: int) -> np.ndarray:
    """Reduce to at most k distinct colours (median cut, nearest palette entry)."""
    if k < 1:
        raise ValidationError(f"colour count {k} must be >= 1")
    image = check_image(image)
    flat = image.reshape(-1, 3)
    colors, inverse, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if len(colors) <= k:
        return image.copy()
    palette = _median_cut(colors, counts, int(k))
    _, nearest = cKDTree(palette).query(colors)
    return np.clip(palette[nearest][inverse].reshape(image.shape), 0.0, 1.0)


def simulate_print(patch: Patch, cp: Optional[ColorParams] = None, blur: int = 3) -> Patch:
    """Approximate a printed-and-photographed copy: duller colours, softer edges."""
    cp = cp or ColorParams(brightness_factor=1.0, contrast_factor=0.85,
                           hue_shift=0.0, saturation_factor=0.7)
    pixels = low_pass(apply_color_params(patch.pixels, cp), blur)
    meta = dict(patch.training_meta, variant="physical", print_params=cp.to_dict(), print_blur=blur)
    return Patch(pixels=pixels, kind=patch.kind, detector_id=patch.detector_id, training_meta=meta)


def scene_transform(image: np.ndarray, params: TransformParams, clip: bool = True) -> np.ndarray:
    """Whole-scene photometric and information-reduction stages of params."""
    out = adjust_brightness(image, params.brightness_factor, clip=clip)
    out = _color_stages(out, 1.0, params.contrast_factor, params.hue_shift, params.saturation_factor)
    if params.lowpass_size:
        out = low_pass(out, params.lowpass_size)
    if params.color_count:
        out = quantize_colors(out, params.color_count)
    return out


def scene_tensor(image: np.ndarray, params: TransformParams, clip: bool = True) -> torch.Tensor:
    """scene_transform as a (3, H, W) detector input.

    Without `clip` the brightness gain is applied last and left unclamped, so
    values above 1.0 reach the detector instead of saturating. The other
    stages then see the scene at its original exposure.
    """
    if clip or params.brightness_factor <= 1.0:
        return to_tensor(scene_transform(image, params, clip=True))
    rest = scene_transform(image, replace(params, brightness_factor=1.0))
    return to_tensor(rest) * params.brightness_factor
