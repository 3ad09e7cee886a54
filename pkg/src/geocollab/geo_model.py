"""Domain model for the shared virtual environment.

Holds the scene every participant replicates: sketches, placed model
references, imported vector layers, and the current decision stage. The
two load-bearing guarantees live here:

- scene_apply is deterministic: identical (scene, action) pairs yield
  identical scenes on every replica, which is what makes follower-side
  re-application converge.
- scene_hash digests a canonical serialization (maps in ascending key
  order, floats at 9 significant digits), so convergence is testable as
  digest equality.

Scenes are immutable values; scene_apply returns a new scene and never
mutates its input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from .protocol import GeoAnchor, MessageKind, SchemaViolation

STAGES = (
    "problem_definition",
    "problem_analysis",
    "solution_generation",
    "solution_evaluation",
)

SKETCH_KINDS = ("polyline", "polygon", "arrow", "text_annotation")

# (min, max) vertex counts; None means unbounded
_VERTEX_RULES: dict[str, tuple[int, int | None]] = {
    "point": (1, 1),
    "polyline": (2, None),
    "linestring": (2, None),
    "polygon": (3, None),
    "arrow": (2, 2),
    "text_annotation": (1, 1),
}

SCENE_ACTION_KINDS = frozenset(
    {
        "sketch_create",
        "sketch_delete",
        "model_place",
        "model_move",
        "model_remove",
        "layer_import",
        "stage_change",
    }
)


class SceneError(Exception):
    """Base for scene-model failures."""


class DuplicateId(SceneError):
    """Create targeting an id that already exists."""


class UnknownId(SceneError):
    """Delete/move targeting an id that does not exist."""


class InvariantViolation(SceneError):
    """Payload or object violates a type invariant."""


class UnsupportedGeometry(SceneError):
    """GeoJSON geometry type outside the Point/LineString/Polygon subset."""


class ParseError(SceneError):
    """Input document is not parseable GeoJSON."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvariantViolation(message)


def _check_vertex_count(kind: str, count: int) -> None:
    lo, hi = _VERTEX_RULES[kind]
    if count < lo or (hi is not None and count > hi):
        bound = f"exactly {lo}" if hi == lo else f"at least {lo}"
        raise InvariantViolation(f"{kind} requires {bound} vertices, got {count}")


def _anchor_from(raw: Any, context: str) -> GeoAnchor:
    try:
        return GeoAnchor.from_dict(raw)
    except SchemaViolation as exc:
        raise InvariantViolation(f"{context}: {exc}") from exc


def _angle(value: Any, name: str, lo: float, hi: float, *, closed_hi: bool = False) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), f"{name} must be a number")
    v = float(value)
    import math

    _require(math.isfinite(v), f"{name} must be finite")
    if closed_hi:
        _require(lo <= v <= hi, f"{name} must be within [{lo}, {hi}]")
    else:
        _require(lo <= v < hi, f"{name} must be within [{lo}, {hi})")
    return v


def _nonempty_str(value: Any, name: str) -> str:
    _require(isinstance(value, str) and value != "", f"{name} must be a non-empty string")
    return value


@dataclass(frozen=True)
class ViewState:
    """Camera pose shared leader -> followers."""

    position: GeoAnchor
    heading: float
    pitch: float
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", _angle(self.heading, "heading", 0.0, 360.0))
        object.__setattr__(self, "pitch", _angle(self.pitch, "pitch", -90.0, 90.0, closed_hi=True))
        object.__setattr__(self, "roll", _angle(self.roll, "roll", -180.0, 180.0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "position": self.position.to_dict(),
            "heading": self.heading,
            "pitch": self.pitch,
            "roll": self.roll,
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "ViewState":
        _require(isinstance(raw, dict), "view must be an object")
        _require("position" in raw, "view.position is required")
        return cls(
            position=_anchor_from(raw["position"], "view.position"),
            heading=raw.get("heading", 0.0),
            pitch=raw.get("pitch", 0.0),
            roll=raw.get("roll", 0.0),
        )


@dataclass(frozen=True)
class Sketch:
    """A drawn annotation: polyline, polygon, arrow (tail->head) or text label."""

    id: str
    kind: str
    vertices: tuple[GeoAnchor, ...]
    author: str
    text: str | None = None
    style: Mapping[str, Any] | None = None

    def __post_init__(self):
        _nonempty_str(self.id, "sketch.id")
        _require(self.kind in SKETCH_KINDS, f"unknown sketch kind {self.kind!r}")
        object.__setattr__(self, "vertices", tuple(self.vertices))
        _check_vertex_count(self.kind, len(self.vertices))
        _nonempty_str(self.author, "sketch.author")
        if self.kind == "text_annotation":
            _require(isinstance(self.text, str) and self.text != "", "text_annotation requires text")
        else:
            _require(self.text is None, f"text is only valid on text_annotation, not {self.kind}")
        if self.style is not None:
            _require(isinstance(self.style, Mapping), "style must be an object")
            for key in self.style:
                _require(key in ("color", "width"), f"unknown style key {key!r}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "kind": self.kind,
            "vertices": [v.to_dict() for v in self.vertices],
            "author": self.author,
        }
        if self.text is not None:
            out["text"] = self.text
        if self.style is not None:
            out["style"] = dict(self.style)
        return out

    @classmethod
    def from_dict(cls, raw: Any) -> "Sketch":
        _require(isinstance(raw, dict), "sketch must be an object")
        for name in ("id", "kind", "vertices", "author"):
            _require(name in raw, f"sketch.{name} is required")
        _require(isinstance(raw["vertices"], list), "sketch.vertices must be a list")
        return cls(
            id=raw["id"],
            kind=raw["kind"],
            vertices=tuple(_anchor_from(v, "sketch.vertices") for v in raw["vertices"]),
            author=raw["author"],
            text=raw.get("text"),
            style=raw.get("style"),
        )


@dataclass(frozen=True)
class ModelPlacement:
    """A referenced 3D asset placed in the scene; geometry lives on the data server."""

    id: str
    model_ref: str
    position: GeoAnchor
    heading: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        _nonempty_str(self.id, "placement.id")
        _nonempty_str(self.model_ref, "placement.model_ref")
        object.__setattr__(self, "heading", _angle(self.heading, "heading", 0.0, 360.0))
        _require(
            isinstance(self.scale, (int, float)) and not isinstance(self.scale, bool) and self.scale > 0,
            "scale must be > 0",
        )
        object.__setattr__(self, "scale", float(self.scale))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "model_ref": self.model_ref,
            "position": self.position.to_dict(),
            "heading": self.heading,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "ModelPlacement":
        _require(isinstance(raw, dict), "placement must be an object")
        for name in ("id", "model_ref", "position"):
            _require(name in raw, f"placement.{name} is required")
        return cls(
            id=raw["id"],
            model_ref=raw["model_ref"],
            position=_anchor_from(raw["position"], "placement.position"),
            heading=raw.get("heading", 0.0),
            scale=raw.get("scale", 1.0),
        )


@dataclass(frozen=True)
class VectorFeature:
    geometry_type: str  # point | linestring | polygon
    coordinates: tuple[GeoAnchor, ...]
    properties: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _require(self.geometry_type in ("point", "linestring", "polygon"),
                 f"unknown geometry type {self.geometry_type!r}")
        object.__setattr__(self, "coordinates", tuple(self.coordinates))
        _check_vertex_count(self.geometry_type, len(self.coordinates))
        _require(isinstance(self.properties, Mapping), "properties must be an object")
        for k, v in self.properties.items():
            _require(isinstance(k, str) and isinstance(v, str), "properties must map strings to strings")

    def to_dict(self) -> dict[str, Any]:
        return {
            "geometry_type": self.geometry_type,
            "coordinates": [c.to_dict() for c in self.coordinates],
            "properties": dict(self.properties),
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "VectorFeature":
        _require(isinstance(raw, dict), "feature must be an object")
        for name in ("geometry_type", "coordinates"):
            _require(name in raw, f"feature.{name} is required")
        _require(isinstance(raw["coordinates"], list), "feature.coordinates must be a list")
        return cls(
            geometry_type=raw["geometry_type"],
            coordinates=tuple(_anchor_from(c, "feature.coordinates") for c in raw["coordinates"]),
            properties=raw.get("properties", {}),
        )


@dataclass(frozen=True)
class VectorLayer:
    id: str
    name: str
    features: tuple[VectorFeature, ...] = ()

    def __post_init__(self):
        _nonempty_str(self.id, "layer.id")
        _nonempty_str(self.name, "layer.name")
        object.__setattr__(self, "features", tuple(self.features))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "VectorLayer":
        _require(isinstance(raw, dict), "layer must be an object")
        for name in ("id", "name", "features"):
            _require(name in raw, f"layer.{name} is required")
        _require(isinstance(raw["features"], list), "layer.features must be a list")
        return cls(
            id=raw["id"],
            name=raw["name"],
            features=tuple(VectorFeature.from_dict(f) for f in raw["features"]),
        )


@dataclass(frozen=True)
class SceneState:
    """The replicated scene. Construct fresh instances; never mutate the maps."""

    sketches: Mapping[str, Sketch] = field(default_factory=dict)
    placements: Mapping[str, ModelPlacement] = field(default_factory=dict)
    layers: Mapping[str, VectorLayer] = field(default_factory=dict)
    stage: str = "problem_definition"

    def __post_init__(self):
        _require(self.stage in STAGES, f"unknown stage {self.stage!r}")
        for mapping, label in ((self.sketches, "sketch"), (self.placements, "placement"), (self.layers, "layer")):
            for key, obj in mapping.items():
                _require(key == obj.id, f"{label} map key {key!r} != object id {obj.id!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sketches": {k: s.to_dict() for k, s in self.sketches.items()},
            "placements": {k: p.to_dict() for k, p in self.placements.items()},
            "layers": {k: l.to_dict() for k, l in self.layers.items()},
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, raw: Any) -> "SceneState":
        _require(isinstance(raw, dict), "scene must be an object")
        return cls(
            sketches={k: Sketch.from_dict(v) for k, v in raw.get("sketches", {}).items()},
            placements={k: ModelPlacement.from_dict(v) for k, v in raw.get("placements", {}).items()},
            layers={k: VectorLayer.from_dict(v) for k, v in raw.get("layers", {}).items()},
            stage=raw.get("stage", "problem_definition"),
        )


def empty_scene(stage: str = "problem_definition") -> SceneState:
    return SceneState(stage=stage)


# --- deterministic action application ---------------------------------------


def scene_apply(scene: SceneState, kind: MessageKind | str, payload: Mapping[str, Any]) -> SceneState:
    """Apply one scene-mutating action payload, returning the new scene.

    Deterministic and side-effect free. Unknown target ids raise UnknownId,
    creates over an existing id raise DuplicateId, malformed payloads raise
    InvariantViolation; the input scene is never modified.
    """
    kind = kind.value if isinstance(kind, MessageKind) else kind
    if kind not in SCENE_ACTION_KINDS:
        raise InvariantViolation(f"{kind!r} is not a scene-mutating action")
    _require(isinstance(payload, Mapping), "payload must be an object")

    if kind == "sketch_create":
        _require("sketch" in payload, "sketch_create requires a sketch")
        sketch = Sketch.from_dict(payload["sketch"])
        if sketch.id in scene.sketches:
            raise DuplicateId(f"sketch {sketch.id!r} already exists")
        return replace(scene, sketches={**scene.sketches, sketch.id: sketch})

    if kind == "sketch_delete":
        sid = _nonempty_str(payload.get("sketch_id"), "sketch_id")
        if sid not in scene.sketches:
            raise UnknownId(f"sketch {sid!r} does not exist")
        remaining = {k: v for k, v in scene.sketches.items() if k != sid}
        return replace(scene, sketches=remaining)

    if kind == "model_place":
        _require("placement" in payload, "model_place requires a placement")
        placement = ModelPlacement.from_dict(payload["placement"])
        if placement.id in scene.placements:
            raise DuplicateId(f"placement {placement.id!r} already exists")
        return replace(scene, placements={**scene.placements, placement.id: placement})

    if kind == "model_move":
        pid = _nonempty_str(payload.get("placement_id"), "placement_id")
        if pid not in scene.placements:
            raise UnknownId(f"placement {pid!r} does not exist")
        current = scene.placements[pid]
        moved = ModelPlacement(
            id=current.id,
            model_ref=current.model_ref,
            position=_anchor_from(payload["position"], "model_move.position")
            if "position" in payload
            else current.position,
            heading=payload.get("heading", current.heading),
            scale=payload.get("scale", current.scale),
        )
        return replace(scene, placements={**scene.placements, pid: moved})

    if kind == "model_remove":
        pid = _nonempty_str(payload.get("placement_id"), "placement_id")
        if pid not in scene.placements:
            raise UnknownId(f"placement {pid!r} does not exist")
        remaining = {k: v for k, v in scene.placements.items() if k != pid}
        return replace(scene, placements=remaining)

    if kind == "layer_import":
        _require("layer" in payload, "layer_import requires a layer")
        layer = VectorLayer.from_dict(payload["layer"])
        if layer.id in scene.layers:
            raise DuplicateId(f"layer {layer.id!r} already exists")
        return replace(scene, layers={**scene.layers, layer.id: layer})

    # stage_change
    stage = payload.get("stage")
    _require(stage in STAGES, f"unknown stage {stage!r}")
    return replace(scene, stage=stage)


# --- canonical serialization and hashing ------------------------------------


def _canonical_fragment(value: Any, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, float):
        out.append(format(value, ".9g"))
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, Mapping):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _canonical_fragment(value[key], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _canonical_fragment(item, out)
        out.append("]")
    else:
        raise InvariantViolation(f"value {value!r} is not canonically serializable")


def canonical_scene_json(scene: SceneState) -> str:
    """Canonical text form: object keys ascending, floats at 9 significant digits."""
    out: list[str] = []
    _canonical_fragment(scene.to_dict(), out)
    return "".join(out)


def scene_hash(scene: SceneState) -> bytes:
    """32-byte SHA-256 digest of the canonical serialization."""
    return hashlib.sha256(canonical_scene_json(scene).encode("utf-8")).digest()


# --- GeoJSON ingestion -------------------------------------------------------

_GEOJSON_TYPES = {"Point": "point", "LineString": "linestring", "Polygon": "polygon"}


def _geojson_position(raw: Any) -> GeoAnchor:
    if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
        raise ParseError(f"coordinate position must be [lon, lat] or [lon, lat, height], got {raw!r}")
    for v in raw:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ParseError(f"coordinate values must be numbers, got {raw!r}")
    lon, lat = float(raw[0]), float(raw[1])
    height = float(raw[2]) if len(raw) == 3 else 0.0
    try:
        return GeoAnchor(lat=lat, lon=lon, height=height)
    except SchemaViolation as exc:
        raise ParseError(f"coordinate out of range: {exc}") from exc


def _geojson_feature(raw: Any, index: int) -> VectorFeature:
    if not isinstance(raw, dict) or raw.get("type") != "Feature":
        raise ParseError(f"features[{index}] is not a Feature object")
    geometry = raw.get("geometry")
    if not isinstance(geometry, dict) or "type" not in geometry:
        raise ParseError(f"features[{index}] has no geometry")
    gtype = geometry["type"]
    if gtype not in _GEOJSON_TYPES:
        raise UnsupportedGeometry(f"features[{index}]: geometry type {gtype!r} is not supported")
    coords = geometry.get("coordinates")
    if gtype == "Point":
        anchors: list[GeoAnchor] = [_geojson_position(coords)]
    elif gtype == "LineString":
        if not isinstance(coords, list):
            raise ParseError(f"features[{index}]: LineString coordinates must be a list")
        anchors = [_geojson_position(p) for p in coords]
    else:  # Polygon: accept a single exterior ring, drop the closing coordinate
        if not isinstance(coords, list) or not coords:
            raise ParseError(f"features[{index}]: Polygon coordinates must be a non-empty list of rings")
        if len(coords) > 1:
            raise UnsupportedGeometry(f"features[{index}]: polygons with interior rings are not supported")
        ring = coords[0]
        if not isinstance(ring, list):
            raise ParseError(f"features[{index}]: Polygon ring must be a list")
        anchors = [_geojson_position(p) for p in ring]
        if len(anchors) >= 2 and anchors[0] == anchors[-1]:
            anchors = anchors[:-1]

    properties: dict[str, str] = {}
    raw_props = raw.get("properties") or {}
    if not isinstance(raw_props, dict):
        raise ParseError(f"features[{index}]: properties must be an object")
    for key, value in raw_props.items():
        properties[str(key)] = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)

    try:
        return VectorFeature(geometry_type=_GEOJSON_TYPES[gtype], coordinates=tuple(anchors), properties=properties)
    except InvariantViolation as exc:
        raise ParseError(f"features[{index}]: {exc}") from exc


def ingest_geojson(doc: str | bytes, layer_id: str | None = None, name: str | None = None) -> VectorLayer:
    """Build a VectorLayer from a GeoJSON FeatureCollection.

    Only Point/LineString/Polygon geometries are accepted; anything else
    raises UnsupportedGeometry. When layer_id is omitted, a deterministic
    id is derived from the feature content.
    """
    try:
        parsed = json.loads(doc)
    except (json.JSONDecodeError, UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(parsed, dict) or parsed.get("type") != "FeatureCollection":
        raise ParseError("document must be a GeoJSON FeatureCollection")
    raw_features = parsed.get("features", [])
    if not isinstance(raw_features, list):
        raise ParseError("features must be a list")

    features = tuple(_geojson_feature(f, i) for i, f in enumerate(raw_features))
    if layer_id is None:
        digest = hashlib.sha256(
            json.dumps([f.to_dict() for f in features], sort_keys=True).encode("utf-8")
        ).hexdigest()
        layer_id = f"layer-{digest[:12]}"
    layer_name = name or (parsed.get("name") if isinstance(parsed.get("name"), str) else None) or layer_id
    return VectorLayer(id=layer_id, name=layer_name, features=features)


def iter_scene_anchors(scene: SceneState) -> Iterable[GeoAnchor]:
    """All anchors referenced by the scene, for bounds/extent computations."""
    for sketch in scene.sketches.values():
        yield from sketch.vertices
    for placement in scene.placements.values():
        yield placement.position
    for layer in scene.layers.values():
        for feature in layer.features:
            yield from feature.coordinates
