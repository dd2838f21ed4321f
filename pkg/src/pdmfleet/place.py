"""Placement of RO footprints on a slice grid and the constraints file format.

Coordinates are slice columns (x) and rows (y). A footprint anchored at
(x, y) covers columns x .. x+w-1 and rows y .. y+h-1. Rectangles are
(x, y, w, h) in the same convention. The grid covers
origin_x .. origin_x+grid_width-1 (likewise for y), so translating a whole
spec, origin included, translates its solution.

Rules:
  * footprints lie inside the grid;
  * the Chebyshev distance between the closest cells of two footprints is at
    least max(min_spacing, 1) (1 means adjacent, i.e. non-overlapping);
  * no footprint intersects a forbidden rectangle;
  * no footprint intersects more than one exclusive rectangle;
  * fixed ROs sit at their given anchors.

The solver places fixed ROs first, then the free ones in index order, each
at the first admissible anchor in row-major order after the previous free
RO's anchor, backtracking on dead ends. It finds a feasible layout when one
exists but makes no attempt at optimal packing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

from .core import InvalidArgument, PdmError

CONSTRAINTS_MAGIC = "pdmfleet-constraints 1"


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    def intersects(self, other: "Rect") -> bool:
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)

    def translated(self, dx: int, dy: int) -> "Rect":
        return Rect(self.x + dx, self.y + dy, self.w, self.h)


class Fixed(NamedTuple):
    ro_index: int
    x: int
    y: int


class InfeasiblePlacement(PdmError):
    def __init__(self, ro_index: int, message: str = ""):
        self.ro_index = ro_index
        super().__init__(message or f"no admissible position for RO {ro_index}")


def _ints(*values) -> None:
    for v in values:
        if not isinstance(v, int) or isinstance(v, bool):
            raise InvalidArgument(f"expected integer, got {v!r}")


@dataclass(frozen=True)
class PlacementSpec:
    grid_width: int
    grid_height: int
    n_ro: int
    footprint_w: int = 1
    footprint_h: int = 1
    min_spacing: int = 0
    forbidden: tuple[Rect, ...] = ()
    exclusive: tuple[Rect, ...] = ()
    fixed: tuple[Fixed, ...] = ()
    chip_model: str = ""
    origin_x: int = 0
    origin_y: int = 0

    def __post_init__(self):
        _ints(self.grid_width, self.grid_height, self.n_ro, self.footprint_w, self.footprint_h,
              self.min_spacing, self.origin_x, self.origin_y)
        if self.grid_width < 1 or self.grid_height < 1:
            raise InvalidArgument("grid dimensions must be >= 1")
        if self.n_ro < 0:
            raise InvalidArgument("n_ro must be >= 0")
        if not (1 <= self.footprint_w <= self.grid_width and 1 <= self.footprint_h <= self.grid_height):
            raise InvalidArgument("footprint does not fit in the grid")
        if self.min_spacing < 0:
            raise InvalidArgument("min_spacing must be >= 0")
        # canonical order: results must not depend on how rectangles were listed
        object.__setattr__(self, "forbidden", tuple(sorted(Rect(*r) for r in self.forbidden)))
        object.__setattr__(self, "exclusive", tuple(sorted(Rect(*r) for r in self.exclusive)))
        object.__setattr__(self, "fixed", tuple(sorted(Fixed(*f) for f in self.fixed)))
        gx, gy = self.origin_x, self.origin_y
        for r in self.forbidden + self.exclusive:
            _ints(*r)
            if r.w < 1 or r.h < 1 or r.x < gx or r.y < gy or r.x + r.w > gx + self.grid_width \
                    or r.y + r.h > gy + self.grid_height:
                raise InvalidArgument(f"rectangle {tuple(r)} is empty or leaves the grid")
        seen = set()
        for f in self.fixed:
            _ints(*f)
            if not 0 <= f.ro_index < self.n_ro:
                raise InvalidArgument(f"fixed RO index {f.ro_index} out of range")
            if f.ro_index in seen:
                raise InvalidArgument(f"RO {f.ro_index} fixed twice")
            seen.add(f.ro_index)
            if not self.inside(f.x, f.y):
                raise InvalidArgument(f"fixed RO {f.ro_index} footprint leaves the grid")
        for i, a in enumerate(self.fixed):
            for b in self.fixed[i + 1:]:
                if not self.spaced((a.x, a.y), (b.x, b.y)):
                    raise InvalidArgument(f"fixed ROs {a.ro_index} and {b.ro_index} conflict")

    # geometry ----------------------------------------------------------

    @property
    def required_distance(self) -> int:
        return max(self.min_spacing, 1)

    def footprint(self, x: int, y: int) -> Rect:
        return Rect(x, y, self.footprint_w, self.footprint_h)

    def inside(self, x: int, y: int) -> bool:
        return (self.origin_x <= x <= self.origin_x + self.grid_width - self.footprint_w
                and self.origin_y <= y <= self.origin_y + self.grid_height - self.footprint_h)

    def distance(self, a: tuple[int, int], b: tuple[int, int]) -> int:
        """Chebyshev distance between the closest cells of two footprints (0 when overlapping)."""
        dx = max(0, abs(a[0] - b[0]) - self.footprint_w + 1)
        dy = max(0, abs(a[1] - b[1]) - self.footprint_h + 1)
        return max(dx, dy)

    def spaced(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        return self.distance(a, b) >= self.required_distance

    def admissible(self, x: int, y: int) -> bool:
        if not self.inside(x, y):
            return False
        fp = self.footprint(x, y)
        if any(fp.intersects(r) for r in self.forbidden):
            return False
        return sum(fp.intersects(r) for r in self.exclusive) <= 1

    def translated(self, dx: int, dy: int) -> "PlacementSpec":
        d = asdict(self)
        d.update(origin_x=self.origin_x + dx, origin_y=self.origin_y + dy,
                 forbidden=tuple(r.translated(dx, dy) for r in self.forbidden),
                 exclusive=tuple(r.translated(dx, dy) for r in self.exclusive),
                 fixed=tuple(Fixed(f.ro_index, f.x + dx, f.y + dy) for f in self.fixed))
        return PlacementSpec(**d)

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {"grid_width": self.grid_width, "grid_height": self.grid_height, "n_ro": self.n_ro,
                "footprint_w": self.footprint_w, "footprint_h": self.footprint_h,
                "min_spacing": self.min_spacing,
                "forbidden": [list(r) for r in self.forbidden],
                "exclusive": [list(r) for r in self.exclusive],
                "fixed": [list(f) for f in self.fixed],
                "chip_model": self.chip_model, "origin_x": self.origin_x, "origin_y": self.origin_y}

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown placement spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("forbidden", "exclusive"):
            d[k] = tuple(Rect(*r) for r in d.get(k, ()))
        d["fixed"] = tuple(Fixed(*f) for f in d.get("fixed", ()))
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidArgument(f"invalid placement spec: {exc}") from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PlacementSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"{path}: not valid JSON ({exc})") from None


@dataclass(frozen=True)
class Placement:
    anchors: tuple[tuple[int, int], ...]  # index = ro_index

    def __getitem__(self, ro_index: int) -> tuple[int, int]:
        return self.anchors[ro_index]

    def __len__(self) -> int:
        return len(self.anchors)

    def as_dict(self) -> dict[int, tuple[int, int]]:
        return dict(enumerate(self.anchors))


# ------------------------------------------------------------------ solver

def candidate_anchors(spec: PlacementSpec) -> list[tuple[int, int]]:
    """Admissible anchors in row-major order (rows outer, columns inner)."""
    return [(x, y)
            for y in range(spec.origin_y, spec.origin_y + spec.grid_height - spec.footprint_h + 1)
            for x in range(spec.origin_x, spec.origin_x + spec.grid_width - spec.footprint_w + 1)
            if spec.admissible(x, y)]


def place(spec: PlacementSpec) -> Placement:
    anchors: list[Optional[tuple[int, int]]] = [None] * spec.n_ro
    for f in spec.fixed:
        if not spec.admissible(f.x, f.y):
            raise InfeasiblePlacement(f.ro_index, f"fixed RO {f.ro_index} violates an area rule")
        anchors[f.ro_index] = (f.x, f.y)
    fixed_pos = [(f.x, f.y) for f in spec.fixed]
    cands = [c for c in candidate_anchors(spec) if all(spec.spaced(c, p) for p in fixed_pos)]
    free = [i for i in range(spec.n_ro) if anchors[i] is None]
    if not free:
        return Placement(tuple(anchors))  # type: ignore[arg-type]

    n_free = len(free)
    chosen: list[int] = []  # indices into cands
    deepest = 0
    # iterative DFS; chosen candidate indices are strictly increasing
    next_start = 0
    while True:
        depth = len(chosen)
        if depth == n_free:
            break
        picked = None
        remaining_needed = n_free - depth
        for ci in range(next_start, len(cands) - remaining_needed + 1):
            c = cands[ci]
            if all(spec.spaced(c, cands[j]) for j in chosen):
                picked = ci
                break
        if picked is not None:
            chosen.append(picked)
            next_start = picked + 1
            deepest = max(deepest, len(chosen))
            continue
        if not chosen:
            raise InfeasiblePlacement(free[min(deepest, n_free - 1)])
        next_start = chosen.pop() + 1
    for i, ci in zip(free, chosen):
        anchors[i] = cands[ci]
    return Placement(tuple(anchors))  # type: ignore[arg-type]


# --------------------------------------------------------------- validator

@dataclass(frozen=True)
class Violation:
    rule: str
    indices: tuple[int, ...]
    detail: str = ""


def validate(placement: Placement, spec: PlacementSpec) -> list[Violation]:
    """Every rule checked independently of the solver; an empty list means ok."""
    out: list[Violation] = []
    if len(placement) != spec.n_ro:
        out.append(Violation("count", (), f"{len(placement)} anchors for {spec.n_ro} ROs"))
    n = min(len(placement), spec.n_ro)
    for i in range(n):
        x, y = placement[i]
        if not spec.inside(x, y):
            out.append(Violation("bounds", (i,)))
        fp = spec.footprint(x, y)
        for r in spec.forbidden:
            if fp.intersects(r):
                out.append(Violation("forbidden", (i,), f"intersects {tuple(r)}"))
        hits = [r for r in spec.exclusive if fp.intersects(r)]
        if len(hits) > 1:
            out.append(Violation("exclusive", (i,), f"intersects {len(hits)} exclusive areas"))
    for i in range(n):
        for j in range(i + 1, n):
            d = spec.distance(placement[i], placement[j])
            if d < spec.required_distance:
                out.append(Violation("spacing", (i, j), f"distance {d} < {spec.required_distance}"))
    for f in spec.fixed:
        if f.ro_index < n and placement[f.ro_index] != (f.x, f.y):
            out.append(Violation("fixed", (f.ro_index,), f"expected anchor ({f.x}, {f.y})"))
    return out


# ------------------------------------------------------- constraints file

def cell_pattern(spec: PlacementSpec) -> list[tuple[int, int, str]]:
    """Internal structure shared by every RO: footprint cells in row-major order.

    The first cell holds the enable gate, the last the counter input; the rest
    hold inverter stages.
    """
    cells = [(dx, dy) for dy in range(spec.footprint_h) for dx in range(spec.footprint_w)]
    out = []
    for k, (dx, dy) in enumerate(cells):
        role = "enable" if k == 0 else ("counter" if k == len(cells) - 1 else f"stage{k}")
        out.append((dx, dy, role))
    return out


def emit_constraints(placement: Placement, spec: PlacementSpec) -> str:
    bad = validate(placement, spec)
    if bad:
        raise InvalidArgument(f"placement is invalid: {bad[0]}")
    lines = [CONSTRAINTS_MAGIC,
             f"chip {spec.chip_model or '-'}",
             f"grid {spec.grid_width} {spec.grid_height} {spec.origin_x} {spec.origin_y}",
             f"footprint {spec.footprint_w} {spec.footprint_h}",
             f"count {spec.n_ro}"]
    pattern = cell_pattern(spec)
    for i, (x, y) in enumerate(placement.anchors):
        lines.append(f"ro {i} {x} {y}")
        lines += [f"  cell {x + dx} {y + dy} {role}" for dx, dy, role in pattern]
        lines.append("end")
    return "\n".join(lines) + "\n"


class ConstraintsFormatError(PdmError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class ParsedConstraints:
    chip_model: str
    grid: tuple[int, int, int, int]
    footprint: tuple[int, int]
    placement: Placement
    cells: tuple[tuple[tuple[int, int, str], ...], ...]


def _int(token: str, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ConstraintsFormatError(line, f"expected an integer, got {token!r}") from None


def parse_constraints(text: str) -> ParsedConstraints:
    lines = text.splitlines()
    if not lines or lines[0] != CONSTRAINTS_MAGIC:
        raise ConstraintsFormatError(1, f"expected {CONSTRAINTS_MAGIC!r}")
    header: dict[str, list[str]] = {}
    pos = 1
    for key in ("chip", "grid", "footprint", "count"):
        if pos >= len(lines):
            raise ConstraintsFormatError(pos + 1, f"missing {key!r} line")
        parts = lines[pos].split(maxsplit=1) if key == "chip" else lines[pos].split()
        if not parts or parts[0] != key:
            raise ConstraintsFormatError(pos + 1, f"expected {key!r} line")
        header[key] = parts[1:]
        pos += 1
    try:
        grid = tuple(int(v) for v in header["grid"])
        foot = tuple(int(v) for v in header["footprint"])
        count = int(header["count"][0])
    except (ValueError, IndexError):
        raise ConstraintsFormatError(pos, "malformed header") from None
    if len(grid) != 4 or len(foot) != 2:
        raise ConstraintsFormatError(pos, "malformed header")
    anchors, cells = [], []
    while pos < len(lines):
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != "ro" or _int(parts[1], pos + 1) != len(anchors):
            raise ConstraintsFormatError(pos + 1, f"expected 'ro {len(anchors)} <x> <y>'")
        ax, ay = _int(parts[2], pos + 1), _int(parts[3], pos + 1)
        pos += 1
        block = []
        while pos < len(lines) and lines[pos].strip() != "end":
            c = lines[pos].split()
            if len(c) != 4 or c[0] != "cell":
                raise ConstraintsFormatError(pos + 1, "expected 'cell <x> <y> <role>' or 'end'")
            block.append((_int(c[1], pos + 1) - ax, _int(c[2], pos + 1) - ay, c[3]))
            pos += 1
        if pos >= len(lines):
            raise ConstraintsFormatError(pos, "unterminated ro block")
        pos += 1
        anchors.append((ax, ay))
        cells.append(tuple(block))
    if len(anchors) != count:
        raise ConstraintsFormatError(pos, f"count {count} but {len(anchors)} ro blocks")
    chip = header["chip"][0] if header["chip"] else ""
    return ParsedConstraints("" if chip == "-" else chip, grid, foot,  # type: ignore[arg-type]
                             Placement(tuple(anchors)), tuple(cells))
