"""Random unit-cell patterns: shape primitives, sampling, rasterization.

All coordinates are nanometers in the unit cell [0, L) x [0, L) with
L = 500 nm. A pattern is a union of 1..6 primitives; rasterization is
periodic, so a shape sticking out of one edge re-enters on the opposite
edge. Pixel (i, j) of a W x H mask covers the point at its center,
x = (i + 0.5) * L / W, y = (j + 0.5) * L / H, and is set when any shape
(or any of its eight periodic translates) contains that point.

Containment is closed (boundary points count as inside). Rotations store
their angle; the test inverse-rotates the query point about the shape
center, so both the scalar and the vectorized path share the exact same
float operations and produce bit-identical masks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .constants import LATTICE_NM
from .errors import ConfigError, FormatError, GeometryError

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# shape primitives


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def validate(self) -> None:
        if not self.r > 0.0:
            raise GeometryError(f"circle radius must be positive, got {self.r}")


@dataclass(frozen=True)
class Rectangle:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def validate(self) -> None:
        if not (self.w > 0.0 and self.h > 0.0):
            raise GeometryError(f"rectangle sides must be positive, got {self.w} x {self.h}")


@dataclass(frozen=True)
class Triangle:
    """Equilateral triangle given by circumradius and rotation."""

    cx: float
    cy: float
    rc: float
    theta: float

    def validate(self) -> None:
        if not self.rc > 0.0:
            raise GeometryError(f"triangle circumradius must be positive, got {self.rc}")


@dataclass(frozen=True)
class Ring:
    cx: float
    cy: float
    r_out: float
    r_in: float

    def validate(self) -> None:
        if not self.r_out > 0.0:
            raise GeometryError(f"ring outer radius must be positive, got {self.r_out}")
        if not 0.0 < self.r_in < self.r_out:
            raise GeometryError(
                f"ring needs 0 < r_in < r_out, got r_in={self.r_in} r_out={self.r_out}"
            )


@dataclass(frozen=True)
class Polygon:
    """Regular polygon given by circumradius, vertex count, rotation."""

    cx: float
    cy: float
    rc: float
    nv: int
    theta: float

    def validate(self) -> None:
        if not self.rc > 0.0:
            raise GeometryError(f"polygon circumradius must be positive, got {self.rc}")
        if self.nv < 3:
            raise GeometryError(f"polygon needs at least 3 vertices, got {self.nv}")


ShapePrimitive = Union[Circle, Rectangle, Triangle, Ring, Polygon]

_KINDS = {
    Circle: "circle",
    Rectangle: "rectangle",
    Triangle: "triangle",
    Ring: "ring",
    Polygon: "polygon",
}


# ---------------------------------------------------------------------------
# containment

# A prepared shape is a plain tuple of floats: rotation already expanded to
# (cos, sin), radii squared, polygon vertices listed explicitly. Preparing
# once keeps transcendental calls out of the per-pixel path and guarantees
# the scalar and grid tests see identical operands.


def _regular_vertices(rc: float, n: int, theta: float) -> tuple:
    verts = []
    for k in range(n):
        a = theta + TWO_PI * k / n
        verts.append((rc * math.cos(a), rc * math.sin(a)))
    return tuple(verts)


def prepare_shape(shape: ShapePrimitive) -> tuple:
    shape.validate()
    if isinstance(shape, Circle):
        return ("circle", shape.cx, shape.cy, shape.r * shape.r)
    if isinstance(shape, Rectangle):
        return (
            "rectangle",
            shape.cx,
            shape.cy,
            math.cos(shape.theta),
            math.sin(shape.theta),
            0.5 * shape.w,
            0.5 * shape.h,
        )
    if isinstance(shape, Triangle):
        return ("polygon", shape.cx, shape.cy, _regular_vertices(shape.rc, 3, shape.theta))
    if isinstance(shape, Ring):
        return ("ring", shape.cx, shape.cy, shape.r_out * shape.r_out, shape.r_in * shape.r_in)
    if isinstance(shape, Polygon):
        return (
            "polygon",
            shape.cx,
            shape.cy,
            _regular_vertices(shape.rc, shape.nv, shape.theta),
        )
    raise GeometryError(f"unknown shape type {type(shape).__name__}")


def contains_prepared(prep: tuple, x, y):
    """Closed containment test for a prepared shape.

    Works elementwise for array x, y and plain floats alike; only uses
    +, -, *, and comparisons so both paths round identically.
    """
    kind = prep[0]
    if kind == "circle":
        _, cx, cy, r2 = prep
        dx = x - cx
        dy = y - cy
        return dx * dx + dy * dy <= r2
    if kind == "rectangle":
        _, cx, cy, c, s, hw, hh = prep
        dx = x - cx
        dy = y - cy
        rx = dx * c + dy * s
        ry = dy * c - dx * s
        return (abs(rx) <= hw) & (abs(ry) <= hh)
    if kind == "ring":
        _, cx, cy, ro2, ri2 = prep
        dx = x - cx
        dy = y - cy
        d2 = dx * dx + dy * dy
        return (d2 <= ro2) & (d2 >= ri2)
    if kind == "polygon":
        _, cx, cy, verts = prep
        dx = x - cx
        dy = y - cy
        inside = None
        n = len(verts)
        for k in range(n):
            x0, y0 = verts[k]
            x1, y1 = verts[(k + 1) % n]
            # vertices wind counter-clockwise, so inside means every edge
            # cross product is >= 0
            edge = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)
            ok = edge >= 0.0
            inside = ok if inside is None else (inside & ok)
        return inside
    raise GeometryError(f"unknown prepared kind {kind!r}")


def shape_contains(shape: ShapePrimitive, x: float, y: float) -> bool:
    """True when point (x, y) lies in the closed region of `shape`."""
    return bool(contains_prepared(prepare_shape(shape), x, y))


# ---------------------------------------------------------------------------
# structure spec and sampling config


@dataclass(frozen=True)
class StructureSpec:
    """A sampled pattern: lattice size, the seed it came from, its shapes."""

    lattice_nm: float
    seed: int
    shapes: tuple

    def validate(self) -> None:
        if not self.lattice_nm > 0.0:
            raise GeometryError(f"lattice must be positive, got {self.lattice_nm}")
        if not 1 <= len(self.shapes) <= 64:
            raise GeometryError(f"structure needs 1..64 shapes, got {len(self.shapes)}")
        for s in self.shapes:
            s.validate()
            if not (0.0 <= s.cx < self.lattice_nm and 0.0 <= s.cy < self.lattice_nm):
                raise GeometryError(
                    f"shape center ({s.cx}, {s.cy}) outside [0, {self.lattice_nm})"
                )

    def to_json(self) -> str:
        shapes = []
        for s in self.shapes:
            d = {"kind": _KINDS[type(s)]}
            for name, value in vars(s).items():
                d[name] = value
            shapes.append(d)
        doc = {"lattice_nm": self.lattice_nm, "seed": self.seed, "shapes": shapes}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "StructureSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"structure JSON is unparseable: {e}") from e
        try:
            shapes = []
            for d in doc["shapes"]:
                d = dict(d)
                kind = d.pop("kind")
                cls = {v: k for k, v in _KINDS.items()}[kind]
                shapes.append(cls(**d))
            spec = StructureSpec(
                lattice_nm=float(doc["lattice_nm"]),
                seed=int(doc["seed"]),
                shapes=tuple(shapes),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"structure JSON missing or bad field: {e}") from e
        spec.validate()
        return spec


ALL_VARIANTS = ("circle", "rectangle", "triangle", "ring", "polygon")


@dataclass(frozen=True)
class GenConfig:
    """Sampling ranges for random structures. Lengths nm, angles rad."""

    shape_count: tuple = (1, 6)
    variants: tuple = ALL_VARIANTS
    circle_r: tuple = (25.0, 150.0)
    rect_w: tuple = (50.0, 300.0)
    rect_h: tuple = (50.0, 300.0)
    tri_rc: tuple = (50.0, 200.0)
    ring_r_out: tuple = (60.0, 200.0)
    ring_ratio: tuple = (0.3, 0.8)
    poly_rc: tuple = (50.0, 200.0)
    poly_nv: tuple = (5, 6)
    theta: tuple = (0.0, TWO_PI)

    def validate(self) -> None:
        lo, hi = self.shape_count
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad shape_count range {self.shape_count}")
        if not self.variants:
            raise ConfigError("at least one shape variant must be enabled")
        for v in self.variants:
            if v not in ALL_VARIANTS:
                raise ConfigError(f"unknown shape variant {v!r}")
        for name in ("circle_r", "rect_w", "rect_h", "tri_rc", "ring_r_out",
                     "ring_ratio", "poly_rc", "theta"):
            a, b = getattr(self, name)
            if not (0.0 <= a <= b):
                raise ConfigError(f"bad range {name}={getattr(self, name)}")
        if not self.poly_nv or any(int(n) < 3 for n in self.poly_nv):
            raise ConfigError(f"bad poly_nv choices {self.poly_nv}")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in vars(self).items()}

    @staticmethod
    def from_dict(doc: dict) -> "GenConfig":
        try:
            kw = {}
            for k, v in doc.items():
                if k == "variants":
                    kw[k] = tuple(str(x) for x in v)
                elif k in ("shape_count", "poly_nv"):
                    kw[k] = tuple(int(x) for x in v)
                else:
                    kw[k] = tuple(float(x) for x in v)
            cfg = GenConfig(**kw)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad generator config document: {e}") from e
        cfg.validate()
        return cfg


def sample_structure(seed: int, cfg: GenConfig | None = None,
                     lattice_nm: float = LATTICE_NM) -> StructureSpec:
    """Draw a random structure from `cfg` using a fixed, documented order.

    One PCG64 generator is seeded from `seed`. Draws, in order:
      1. shape count n, integers on [lo, hi]
      2. per shape: variant index, then center cx, cy ~ U(0, L), then the
         variant's own parameters in declaration order (sizes before
         ratios before vertex counts before rotation).
    Changing the config ranges changes values but never the draw order.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    lo, hi = cfg.shape_count
    n = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(n):
        variant = cfg.variants[int(rng.integers(0, len(cfg.variants)))]
        cx = float(rng.uniform(0.0, lattice_nm))
        cy = float(rng.uniform(0.0, lattice_nm))
        if variant == "circle":
            r = float(rng.uniform(*cfg.circle_r))
            shapes.append(Circle(cx, cy, r))
        elif variant == "rectangle":
            w = float(rng.uniform(*cfg.rect_w))
            h = float(rng.uniform(*cfg.rect_h))
            th = float(rng.uniform(*cfg.theta))
            shapes.append(Rectangle(cx, cy, w, h, th))
        elif variant == "triangle":
            rc = float(rng.uniform(*cfg.tri_rc))
            th = float(rng.uniform(*cfg.theta))
            shapes.append(Triangle(cx, cy, rc, th))
        elif variant == "ring":
            r_out = float(rng.uniform(*cfg.ring_r_out))
            ratio = float(rng.uniform(*cfg.ring_ratio))
            shapes.append(Ring(cx, cy, r_out, r_out * ratio))
        else:
            rc = float(rng.uniform(*cfg.poly_rc))
            nv = int(cfg.poly_nv[int(rng.integers(0, len(cfg.poly_nv)))])
            th = float(rng.uniform(*cfg.theta))
            shapes.append(Polygon(cx, cy, rc, nv, th))
    spec = StructureSpec(lattice_nm=lattice_nm, seed=int(seed), shapes=tuple(shapes))
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# mask


@dataclass
class Mask:
    """Binary W x H pattern; bits[j, i] == 1 means silver at pixel (i, j)."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __init__(self, width: int, height: int, bits: np.ndarray):
        if width < 1 or height < 1:
            raise GeometryError(f"mask must be at least 1x1, got {width}x{height}")
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (height, width):
            raise GeometryError(
                f"bits shape {bits.shape} does not match height x width ({height}, {width})"
            )
        if not np.all((bits == 0) | (bits == 1)):
            raise GeometryError("mask bits must be 0 or 1")
        self.width = width
        self.height = height
        self.bits = bits

    def fill_fraction(self) -> float:
        return float(self.bits.mean())

    def packed(self) -> bytes:
        """Row-major bit packing, least significant bit first."""
        return np.packbits(self.bits.ravel(), bitorder="little").tobytes()

    @staticmethod
    def from_packed(width: int, height: int, payload: bytes) -> "Mask":
        need = (width * height + 7) // 8
        if len(payload) != need:
            raise FormatError(f"packed mask needs {need} bytes, got {len(payload)}")
        flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                             count=width * height, bitorder="little")
        return Mask(width, height, flat.reshape(height, width))

    def to_pgm(self) -> bytes:
        """Binary PGM, maxval 255: silver pixels black (0), empty white (255)."""
        gray = np.where(self.bits == 1, 0, 255).astype(np.uint8)
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + gray.tobytes()

    @staticmethod
    def from_pgm(data: bytes) -> "Mask":
        tokens = []
        pos = 0
        # header is ASCII tokens separated by whitespace, # starts a comment
        while len(tokens) < 4 and pos < len(data):
            ch = data[pos:pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                start = pos
                while pos < len(data) and not data[pos:pos + 1].isspace():
                    pos += 1
                tokens.append(data[start:pos])
                if len(tokens) == 4:
                    pos += 1  # single whitespace after maxval
        if len(tokens) != 4 or tokens[0] != b"P5":
            raise FormatError("not a binary PGM (P5) file")
        try:
            width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        except ValueError as e:
            raise FormatError(f"bad PGM header: {e}") from e
        if maxval != 255:
            raise FormatError(f"PGM maxval must be 255, got {maxval}")
        body = data[pos:pos + width * height]
        if len(body) != width * height:
            raise FormatError("PGM payload truncated")
        gray = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
        return Mask(width, height, (gray < 128).astype(np.uint8))


def rasterize(spec: StructureSpec, width: int, height: int) -> Mask:
    """Rasterize `spec` onto a W x H grid with periodic wrap-around.

    A pixel is silver when its center lies in any shape translated by
    (ox, oy) for ox, oy in {-L, 0, +L}.
    """
    spec.validate()
    L = spec.lattice_nm
    xs = (np.arange(width, dtype=np.float64) + 0.5) * (L / width)
    ys = (np.arange(height, dtype=np.float64) + 0.5) * (L / height)
    X = np.broadcast_to(xs[None, :], (height, width))
    Y = np.broadcast_to(ys[:, None], (height, width))
    acc = np.zeros((height, width), dtype=bool)
    offsets = (-L, 0.0, L)
    for shape in spec.shapes:
        prep = prepare_shape(shape)
        for oy in offsets:
            for ox in offsets:
                acc |= contains_prepared(prep, X - ox, Y - oy)
    return Mask(width, height, acc.astype(np.uint8))
