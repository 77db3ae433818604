"""
Geometric face normalization: five landmarks are mapped onto a canonical layout in
a 112x96 frame by a least-squares similarity transform, the image is warped and
converted to grayscale. Records without usable landmarks fall back to a
bounding-box crop.
"""

import math
import os
from collections import defaultdict
from dataclasses import dataclass

import cv2
import numpy as np
from skimage.transform import SimilarityTransform as _SkSimilarity

from errors import ContractViolation, DataError
from tensor_core import Tensor

FRAME_HEIGHT = 112
FRAME_WIDTH = 96
FRAME_SHAPE = (FRAME_HEIGHT, FRAME_WIDTH)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# left eye, right eye, nose tip, left mouth corner, right mouth corner (x, y).
# Eyes sit on one row at 45% of the height; the layout is mirror-symmetric about
# the pixel-centre midline x = 47.5.
DEFAULT_CANONICAL_LANDMARKS = (
    (29.9, 50.4),
    (65.1, 50.4),
    (47.5, 71.7),
    (32.9, 92.3),
    (62.1, 92.3),
)

# index permutation that swaps left/right points after a horizontal mirror
MIRROR_ORDER = (1, 0, 2, 4, 3)

PROVENANCES = ("aligned", "fallback_crop")


@dataclass
class LandmarkSet:
    points: np.ndarray    # [5, 2] image coordinates (x, y)
    detected: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (5, 2):
            raise ContractViolation(f"a landmark set has exactly five (x, y) points, got shape {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ContractViolation("landmark coordinates must be finite")

    def mirrored(self, width):
        """Landmarks of the left-right mirrored image, with left/right labels swapped."""
        points = self.points.copy()
        points[:, 0] = (width - 1) - points[:, 0]
        return LandmarkSet(points[list(MIRROR_ORDER)], self.detected)


@dataclass
class SimilarityTransform:
    scale: float
    theta: float
    tx: float
    ty: float

    @property
    def matrix(self):
        c, s = self.scale * math.cos(self.theta), self.scale * math.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty]])

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self):
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.theta), math.sin(-self.theta)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_scale, -self.theta, tx, ty)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)


@dataclass
class AlignedFace:
    image: np.ndarray     # [112, 96] float32 grayscale, 0..255 scale
    provenance: str

    def __post_init__(self):
        if self.image.shape != FRAME_SHAPE:
            raise ContractViolation(f"aligned face must be {FRAME_HEIGHT}x{FRAME_WIDTH}, got {self.image.shape}")
        if self.provenance not in PROVENANCES:
            raise ContractViolation(f"unknown provenance '{self.provenance}'")

    @property
    def normalized(self):
        return pixel_normalize(self.image).data


def _points(landmarks):
    return landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)


def estimate_similarity(src, dst):
    """
    Least-squares similarity mapping ``src`` onto ``dst``.
    Returns (SimilarityTransform, residual) where residual is the RMS point error.
    """
    src, dst = _points(src), _points(dst)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ContractViolation(f"point sets must both be [K, 2], got {src.shape} and {dst.shape}")
    if len(src) < 2:
        raise ContractViolation("a similarity needs at least two points")
    if np.ptp(src, axis=0).max() <= 1e-12:
        raise ContractViolation("degenerate landmarks: all source points coincide")

    fitted = _SkSimilarity()
    if not fitted.estimate(src, dst):
        raise ContractViolation("similarity estimation failed on the given landmarks")
    params = fitted.params
    transform = SimilarityTransform(
        scale=float(math.hypot(params[0, 0], params[1, 0])),
        theta=float(math.atan2(params[1, 0], params[0, 0])),
        tx=float(params[0, 2]),
        ty=float(params[1, 2]),
    )
    residual = float(np.sqrt(((transform.apply(src) - dst) ** 2).sum(axis=1).mean()))
    return transform, residual


def warp(image, transform, out_shape=FRAME_SHAPE):
    """Bilinear inverse-mapped warp; samples from outside the source read as 0."""
    image = np.asarray(image)
    if image.dtype not in (np.uint8, np.float32, np.float64):
        image = image.astype(np.float32)
    height, width = out_shape
    return cv2.warpAffine(
        image, transform.matrix, (width, height),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )


def to_grayscale(image, order="rgb"):
    """ITU-R BT.601 luma; ``order`` names the channel order of the input."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"to_grayscale expects an [H, W, 3] image, got shape {image.shape}")
    codes = {"rgb": cv2.COLOR_RGB2GRAY, "bgr": cv2.COLOR_BGR2GRAY}
    if order not in codes:
        raise ContractViolation(f"channel order must be 'rgb' or 'bgr', got '{order}'")
    return cv2.cvtColor(image.astype(np.float32), codes[order])


def clamp_bbox(bbox, image_shape):
    x, y, w, h = bbox
    height, width = image_shape[:2]
    x0 = int(np.clip(round(x), 0, width))
    y0 = int(np.clip(round(y), 0, height))
    x1 = int(np.clip(round(x + w), 0, width))
    y1 = int(np.clip(round(y + h), 0, height))
    return x0, y0, x1, y1


def fallback_crop(image, bbox, order="rgb"):
    x0, y0, x1, y1 = clamp_bbox(bbox, np.shape(image))
    if x1 <= x0 or y1 <= y0:
        raise ContractViolation(f"bounding box {tuple(bbox)} has no area inside a {np.shape(image)[:2]} image")
    gray = to_grayscale(np.asarray(image)[y0:y1, x0:x1], order)
    resized = cv2.resize(gray, (FRAME_WIDTH, FRAME_HEIGHT), interpolation=cv2.INTER_LINEAR)
    return AlignedFace(resized.astype(np.float32), "fallback_crop")


def pixel_normalize(image):
    return Tensor((np.asarray(image, dtype=np.float32) - 127.5) / 128.0)


def closest_to_center(records, image_shape):
    """Pick the record whose bbox centre lies nearest the image centre."""
    height, width = image_shape[:2]
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])

    def distance(record):
        x, y, w, h = record.bbox
        return float(np.hypot(x + w / 2.0 - centre[0], y + h / 2.0 - centre[1]))

    return min(records, key=distance)


def load_image(path):
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise DataError(f"cannot decode image {path}")
    return image


class FaceAligner:
    def __init__(self, config=None):
        config = config or {}
        table = config.get("canonical_landmarks", DEFAULT_CANONICAL_LANDMARKS)
        self.canonical = LandmarkSet(np.asarray(table, dtype=np.float64))
        self.max_residual = float(config.get("max_residual", np.inf))

    def align(self, image, landmarks=None, bbox=None, order="rgb"):
        """Aligned crop when landmarks are usable, otherwise a bounding-box crop."""
        if landmarks is not None and landmarks.detected:
            try:
                transform, residual = estimate_similarity(landmarks, self.canonical)
            except ContractViolation:
                residual = np.inf
            if residual <= self.max_residual:
                gray = to_grayscale(image, order)
                return AlignedFace(warp(gray, transform).astype(np.float32), "aligned")
        if bbox is None:
            raise ContractViolation("no usable landmarks and no bounding box to fall back on")
        return fallback_crop(image, bbox, order)

    def align_manifest(self, records, image_root="", quiet=False):
        """
        Yield (image_path, AlignedFace) per manifest record, in order. An image listed
        with several bounding boxes resolves to its most central face every time.
        Unreadable images are skipped with a warning.
        """
        by_image = defaultdict(list)
        for record in records:
            by_image[record.image_path].append(record)
        aligned = {}
        for record in records:
            image_path = record.image_path
            if image_path not in aligned:
                aligned[image_path] = self._align_image(image_path, by_image[image_path], image_root, quiet)
            if aligned[image_path] is not None:
                yield image_path, aligned[image_path]

    def _align_image(self, image_path, candidates, image_root, quiet):
        try:
            image = load_image(os.path.join(image_root, image_path))
        except DataError as e:
            if not quiet:
                print(f"⚠ skipping {image_path}: {e}")
            return None
        record = candidates[0] if len(candidates) == 1 else closest_to_center(candidates, image.shape)
        landmarks = LandmarkSet(record.landmarks) if record.detected else None
        return self.align(image, landmarks, record.bbox, order="bgr")
