"""Planar landmark registration: homographies, plane poses and map annotations.

Frames
------
map
    right-handed, z up; the navigation map is the z = 0 plane.
camera
    pinhole, x right, y down, z along the optical axis.  A camera pose in the
    map is ``(x, y, theta, height, pitch)``: position, heading about map z,
    mount height and upward tilt of the optical axis.
plane
    a landmark's model frame; model points lie on z = 0 and the landmark's
    readable face looks along -z.  A placard viewed head-on therefore has the
    identity rotation in the camera frame.

Vision and text reading stop at the detections file: this module receives
image points and label payloads, it does not detect or read anything.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .kb import KnowledgeBase, Triple
from .world import data_path

MERGE_DISTANCE = 0.25  # m
MERGE_ANGLE = math.radians(15.0)
GRID_RESOLUTION = 0.002  # m per rectified cell


class PrismError(Exception):
    pass


class DegenerateConfiguration(PrismError):
    pass


class BehindCamera(PrismError):
    pass


class EmptyLabel(PrismError):
    pass


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_dict(cls, d: Mapping) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    theta: float
    height: float = 0.0
    pitch: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "CameraPose":
        return cls(float(d["x"]), float(d["y"]), float(d["theta"]), float(d.get("height", 0.0)), float(d.get("pitch", 0.0)))


@dataclass
class Payload:
    """What the detector attached to a detection: embedded text and/or a pixel block."""

    text: str | None = None
    pixels: np.ndarray | None = None

    @classmethod
    def from_json(cls, raw) -> "Payload":
        if raw is None:
            return cls()
        if isinstance(raw, str):
            return cls(text=raw)
        pixels = raw.get("pixels")
        return cls(text=raw.get("text"), pixels=None if pixels is None else np.asarray(pixels, dtype=float))


@dataclass
class PlanarDetection:
    cls: str
    image_points: np.ndarray
    model_points: np.ndarray
    camera_pose: CameraPose
    intrinsics: CameraIntrinsics
    payload: Payload = field(default_factory=Payload)
    id: str | None = None

    def __post_init__(self):
        self.image_points = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        self.model_points = np.asarray(self.model_points, dtype=float).reshape(-1, 2)
        if len(self.image_points) != len(self.model_points):
            raise ValueError("image and model point counts differ")
        if len(self.model_points) < 4:
            raise DegenerateConfiguration("need at least 4 correspondences")

    @classmethod
    def from_dict(cls, d: Mapping, index: int = 0) -> "PlanarDetection":
        return cls(
            cls=d["class"],
            image_points=d["image_points"],
            model_points=d["model_points"],
            camera_pose=CameraPose.from_dict(d["camera_pose"]),
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            payload=Payload.from_json(d.get("payload")),
            id=d.get("id", f"det-{index}"),
        )


@dataclass
class PlanePose:
    """Plane frame expressed in the camera frame: X_cam = R @ X_plane + t."""

    R: np.ndarray
    t: np.ndarray


@dataclass
class MapAnnotation:
    id: str
    cls: str
    x: float
    y: float
    theta: float
    height: float
    label: str
    confidence: float
    sources: list[str] = field(default_factory=list)
    weight: float = 0.0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "x": self.x,
            "y": self.y,
            "theta": self.theta,
            "height": self.height,
            "label": self.label,
            "confidence": self.confidence,
        }


# ---------------------------------------------------------------------------
# homography estimation


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-300:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _homog(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a homography to (N, 2) points."""
    q = _homog(np.asarray(pts, dtype=float)) @ np.asarray(h).T
    return q[:, :2] / q[:, 2:3]


def _check_spread(pts: np.ndarray, what: str, rel: float = 1e-9) -> None:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] <= 0 or s[-1] / s[0] < rel:
        raise DegenerateConfiguration(f"{what} points are collinear or coincident")
    if len(pts) == 4:
        scale = s[0] ** 2
        for a, b, d in itertools.combinations(pts, 3):
            area = abs((b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0]))
            if area < rel * scale:
                raise DegenerateConfiguration(f"three of the four {what} points are collinear")


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if abs(h[2, 2]) > 1e-12 * np.abs(h).max():
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def estimate_homography(model_points, image_points) -> tuple[np.ndarray, float]:
    """Normalized DLT fit of ``image ~ H @ model``; returns (H, residual in px)."""
    X = np.asarray(model_points, dtype=float).reshape(-1, 2)
    x = np.asarray(image_points, dtype=float).reshape(-1, 2)
    if len(X) != len(x):
        raise ValueError("model and image point counts differ")
    if len(X) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    _check_spread(X, "model")
    _check_spread(x, "image")
    T_m, T_i = _normalizer(X), _normalizer(x)
    Xn = _homog(X) @ T_m.T
    xn = _homog(x) @ T_i.T
    rows = []
    for (X1, X2, X3), (u, v, w) in zip(Xn, xn):
        p = np.array([X1, X2, X3])
        rows.append(np.concatenate([np.zeros(3), -w * p, v * p]))
        rows.append(np.concatenate([w * p, np.zeros(3), -u * p]))
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("correspondences do not determine a unique homography")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.solve(T_i, hn @ T_m)
    if np.linalg.cond(h) > 1e15:
        raise DegenerateConfiguration("estimated homography is singular")
    h = normalize_homography(h)
    return h, symmetric_transfer_error(h, X, x)


def reprojection_rms(h: np.ndarray, model_points, image_points) -> float:
    d = project(h, np.asarray(model_points, dtype=float)) - np.asarray(image_points, dtype=float)
    return float(np.sqrt((d**2).sum(axis=1).mean()))


def _pixels_per_unit(h: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Local linear scale of ``h`` at each model point (sqrt of the Jacobian determinant)."""
    q = _homog(X) @ h.T
    w = q[:, 2]
    img = q[:, :2] / w[:, None]
    dets = []
    for (u, v), wi in zip(img, w):
        J = (h[:2, :2] - np.outer([u, v], h[2, :2])) / wi
        dets.append(abs(np.linalg.det(J)))
    return np.sqrt(np.array(dets))


def symmetric_transfer_error(h: np.ndarray, model_points, image_points) -> float:
    """RMS of forward plus backward transfer error, both measured in pixels.

    The backward (model-plane) error is converted to pixels with the local
    scale of ``h`` so the two halves are commensurable.
    """
    X = np.asarray(model_points, dtype=float)
    x = np.asarray(image_points, dtype=float)
    fwd = ((project(h, X) - x) ** 2).sum(axis=1)
    back = ((project(np.linalg.inv(h), x) - X) ** 2).sum(axis=1) * _pixels_per_unit(h, X) ** 2
    return float(np.sqrt((fwd + back).mean()))


# ---------------------------------------------------------------------------
# pose


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def decompose_to_pose(h: np.ndarray, k: CameraIntrinsics, model_points=None) -> PlanePose:
    """Plane pose in the camera frame from a model-to-image homography.

    A homography is only defined up to scale, so a plane wholly behind the
    camera is indistinguishable from its mirror image in front of it; the sign
    is chosen to put the plane in front.  BehindCamera is raised when no sign
    works: the plane passes through the optical centre, or (when
    ``model_points`` are given) the landmark straddles the image plane.
    """
    B = np.linalg.solve(k.matrix, np.asarray(h, dtype=float))
    n1, n2 = np.linalg.norm(B[:, 0]), np.linalg.norm(B[:, 1])
    if n1 == 0 or n2 == 0:
        raise PrismError("homography is singular")
    lam = 0.5 * (n1 + n2)
    r1, r2 = B[:, 0] / n1, B[:, 1] / n2
    t = B[:, 2] / lam
    if abs(t[2]) <= 1e-12 * max(1.0, np.linalg.norm(t)):
        raise BehindCamera("plane passes through the camera centre")
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    if model_points is not None:
        X = np.asarray(model_points, dtype=float).reshape(-1, 2)
        depth = X @ R[2, :2] + t[2]
        if np.any(depth <= 0):
            raise BehindCamera("landmark is not wholly in front of the camera")
    return PlanePose(R, t)


def compose_homography(pose: PlanePose, k: CameraIntrinsics) -> np.ndarray:
    """Model-to-image homography of a plane at ``pose``; inverse of :func:`decompose_to_pose`."""
    return normalize_homography(k.matrix @ np.column_stack([pose.R[:, 0], pose.R[:, 1], pose.t]))


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# camera axes (right, down, forward) in a level, +x-facing map frame
_CAM_TO_LEVEL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_in_map(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and position of the camera frame in the map frame."""
    R = _rz(pose.theta) @ _ry(-pose.pitch) @ _CAM_TO_LEVEL
    return R, np.array([pose.x, pose.y, pose.height])


def plane_in_map(plane: PlanePose, camera: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    R_mc, c = camera_in_map(camera)
    return R_mc @ plane.R, c + R_mc @ plane.t


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def map_pose(plane: PlanePose, camera: CameraPose) -> tuple[float, float, float, float]:
    """(x, y, heading, height) of a landmark; heading is the direction its face looks."""
    R, p = plane_in_map(plane, camera)
    facing = -R[:, 2]
    return float(p[0]), float(p[1]), wrap_angle(math.atan2(facing[1], facing[0])), float(p[2])


# ---------------------------------------------------------------------------
# rectification and labels


@dataclass
class RectifiedGrid:
    cells: np.ndarray  # (rows, cols), row = model y, col = model x
    origin: tuple[float, float]  # model coordinates of cell (0, 0) centre
    resolution: float


@dataclass
class RectifiedPayload:
    text: str | None = None
    grid: RectifiedGrid | None = None
    points: np.ndarray | None = None


def rectify_points(h: np.ndarray, image_points) -> np.ndarray:
    return project(np.linalg.inv(np.asarray(h, dtype=float)), np.asarray(image_points, dtype=float).reshape(-1, 2))


def rectify_grid(
    h: np.ndarray,
    pixels: np.ndarray,
    bounds: tuple[float, float, float, float],
    resolution: float = GRID_RESOLUTION,
    fill: float = 0.0,
) -> RectifiedGrid:
    """Resample an image block onto a model-plane grid by nearest neighbour.

    ``bounds`` is (xmin, ymin, xmax, ymax) in model units; each output cell
    centre is pushed through ``h`` and the nearest image pixel read.
    """
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / resolution)))
    ny = max(1, int(round((ymax - ymin) / resolution)))
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    img = project(h, np.column_stack([gx.ravel(), gy.ravel()]))
    col = np.floor(img[:, 0]).astype(np.int64)
    row = np.floor(img[:, 1]).astype(np.int64)
    inside = (row >= 0) & (row < pixels.shape[0]) & (col >= 0) & (col < pixels.shape[1])
    out = np.full(len(img), fill, dtype=np.asarray(pixels).dtype)
    out[inside] = pixels[row[inside], col[inside]]
    return RectifiedGrid(out.reshape(ny, nx), (float(xs[0]), float(ys[0])), resolution)


def rectify(
    h: np.ndarray,
    payload: Payload | np.ndarray,
    bounds: tuple[float, float, float, float] | None = None,
    resolution: float = GRID_RESOLUTION,
) -> RectifiedPayload | np.ndarray:
    """Bring a payload into the landmark's model frame.

    A bare (N, 2) array is treated as image points and mapped through H^-1.
    For a :class:`Payload`, text passes through and a pixel block is resampled
    over ``bounds`` (defaulting to the pixel block's own extent under H^-1).
    """
    h = np.asarray(h, dtype=float)
    if np.linalg.cond(h) > 1e15:
        raise PrismError("homography is not invertible")
    if isinstance(payload, np.ndarray):
        return rectify_points(h, payload)
    grid = None
    if payload.pixels is not None:
        if bounds is None:
            rows, cols = payload.pixels.shape[:2]
            corners = rectify_points(h, [[0, 0], [cols, 0], [cols, rows], [0, rows]])
            lo, hi = corners.min(axis=0), corners.max(axis=0)
            bounds = (lo[0], lo[1], hi[0], hi[1])
        grid = rectify_grid(h, payload.pixels, bounds, resolution)
    return RectifiedPayload(text=payload.text, grid=grid)


class LabelExtractor(Protocol):
    def __call__(self, payload: RectifiedPayload) -> tuple[str, float]: ...


def embedded_text(payload: RectifiedPayload) -> tuple[str, float]:
    """Reads the text the detection carried; a stand-in for an OCR plug-in."""
    return payload.text or "", 1.0


def extract_label(payload: RectifiedPayload, extractor: LabelExtractor = embedded_text) -> tuple[str, float]:
    text, confidence = extractor(payload)
    text = " ".join((text or "").split())
    if not text:
        raise EmptyLabel("no label text")
    return text, float(confidence)


# ---------------------------------------------------------------------------
# annotation map


def _angle_diff(a: float, b: float) -> float:
    return abs(wrap_angle(a - b))


@dataclass
class AnnotationMap:
    annotations: dict[str, MapAnnotation] = field(default_factory=dict)
    merge_distance: float = MERGE_DISTANCE
    merge_angle: float = MERGE_ANGLE

    def __len__(self) -> int:
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations.values())

    def _next_id(self, cls: str) -> str:
        n = 1
        while f"{cls}-{n}" in self.annotations:
            n += 1
        return f"{cls}-{n}"

    def match(self, cls: str, x: float, y: float, theta: float) -> MapAnnotation | None:
        best = None
        for a in self.annotations.values():
            if a.cls != cls:
                continue
            d = math.hypot(a.x - x, a.y - y)
            if d <= self.merge_distance and _angle_diff(a.theta, theta) <= self.merge_angle:
                if best is None or d < best[0]:
                    best = (d, a)
        return None if best is None else best[1]

    def add(self, cls: str, x: float, y: float, theta: float, height: float, label: str, confidence: float, source: str) -> MapAnnotation:
        """Insert an observation, merging it into a nearby one of the same class."""
        a = self.match(cls, x, y, theta)
        w = max(confidence, 1e-12)
        if a is None:
            a = MapAnnotation(self._next_id(cls), cls, x, y, wrap_angle(theta), height, label, confidence, [source], w)
            self.annotations[a.id] = a
            return a
        total = a.weight + w
        a.x = (a.weight * a.x + w * x) / total
        a.y = (a.weight * a.y + w * y) / total
        a.height = (a.weight * a.height + w * height) / total
        a.theta = math.atan2(
            a.weight * math.sin(a.theta) + w * math.sin(theta), a.weight * math.cos(a.theta) + w * math.cos(theta)
        )
        if confidence > a.confidence:
            a.label, a.confidence = label, confidence
        a.weight = total
        a.sources.append(source)
        return a

    def to_json(self) -> list[dict]:
        return [a.to_dict() for a in sorted(self.annotations.values(), key=lambda a: a.id)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationMap":
        """Read an exported map; a missing file gives an empty map."""
        m = cls()
        p = Path(path)
        if not p.exists():
            return m
        for d in json.loads(p.read_text()):
            kind = d.get("class") or d["id"].rsplit("-", 1)[0]
            m.annotations[d["id"]] = MapAnnotation(
                d["id"], kind, d["x"], d["y"], d["theta"], d["height"], d["label"], d["confidence"], [], d["confidence"]
            )
        return m


def _fmt(v: float) -> str:
    return f"{round(v, 3) + 0.0:.3f}"  # + 0.0 turns -0.0 into 0.0


def annotation_facts(a: MapAnnotation) -> list[Triple]:
    return [
        Triple(a.id, "is-a", a.cls),
        Triple(a.id, "at-pose", f"{_fmt(a.x)}/{_fmt(a.y)}/{_fmt(a.theta)}"),
        Triple(a.id, "labeled", a.label),
    ]


def write_facts(kb: KnowledgeBase, a: MapAnnotation) -> list[Triple]:
    """Record an annotation in the KB; class membership comes from the entity itself."""
    if a.id not in kb.entities:
        kb.add_entity(a.id, a.cls)
    facts = annotation_facts(a)
    for t in facts[1:]:
        kb.assert_fact(t)
    return facts


def register_annotation(
    detection: PlanarDetection,
    amap: AnnotationMap,
    kb: KnowledgeBase | None = None,
    extractor: LabelExtractor = embedded_text,
) -> tuple[MapAnnotation, list[Triple]]:
    """Full pipeline for one detection: fit, pose, rectify, read, place in the map."""
    h, _ = estimate_homography(detection.model_points, detection.image_points)
    plane = decompose_to_pose(h, detection.intrinsics, detection.model_points)
    label, conf = extract_label(rectify(h, detection.payload), extractor)
    x, y, theta, height = map_pose(plane, detection.camera_pose)
    a = amap.add(detection.cls, x, y, theta, height, label, conf, detection.id or "")
    facts = write_facts(kb, a) if kb is not None else annotation_facts(a)
    return a, facts


def load_detections(path: str | Path) -> list[PlanarDetection]:
    """Read a detections file; a bare name falls back to the bundled samples."""
    path = Path(path)
    if not path.exists() and not path.is_absolute():
        path = data_path("detections", path.name)
    data = json.loads(path.read_text())
    return [PlanarDetection.from_dict(d, i) for i, d in enumerate(data)]


def ingest(
    detections: Iterable[PlanarDetection],
    amap: AnnotationMap | None = None,
    kb: KnowledgeBase | None = None,
    extractor: LabelExtractor = embedded_text,
) -> AnnotationMap:
    amap = amap if amap is not None else AnnotationMap()
    for det in detections:
        register_annotation(det, amap, kb, extractor)
    return amap


# ---------------------------------------------------------------------------
# synthetic views, shared by fixtures and the noise study


def look_at_pose(camera: CameraPose, center: Sequence[float], heading: float) -> PlanePose:
    """Plane pose in the camera frame for a vertical landmark at ``center`` (map x, y, z)
    whose face looks along map heading ``heading``."""
    R_mc, c = camera_in_map(camera)
    face = np.array([math.cos(heading), math.sin(heading), 0.0])
    z_p = -face
    y_p = np.array([0.0, 0.0, -1.0])  # model y runs down the placard
    x_p = np.cross(y_p, z_p)
    R_mp = np.column_stack([x_p, y_p, z_p])
    return PlanePose(R_mc.T @ R_mp, R_mc.T @ (np.asarray(center, dtype=float) - c))


def synthesize_detection(
    cls: str,
    camera: CameraPose,
    k: CameraIntrinsics,
    center: Sequence[float],
    heading: float,
    model_points,
    label: str,
    id: str | None = None,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PlanarDetection:
    plane = look_at_pose(camera, center, heading)
    X = np.asarray(model_points, dtype=float)
    x = project(compose_homography(plane, k), X)
    if noise:
        x = x + (rng or np.random.default_rng()).normal(0.0, noise, x.shape)
    return PlanarDetection(cls, x, X, camera, k, Payload(text=label), id)


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of Ra Rb^T; atan2 keeps precision near zero where acos of the trace does not."""
    M = Ra @ Rb.T
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = (np.trace(M) - 1.0) / 2.0
    return float(math.atan2(s, c))
