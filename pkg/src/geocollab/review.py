"""Review subsystem: versioned published solutions and geo-anchored comments.

Solutions published from a design session are immutable once written;
revising a plan publishes the next version of the same solution, and every
earlier version stays readable together with its comments (the audit trail
of the publish/comment/revise loop). Comments anchor to a point in the 3D
scene and thread through parent ids.

Persistence is an append-only JSON-lines log with an in-memory index
rebuilt by replaying the log at startup. Appends are fsynced before an
operation acknowledges, so an acknowledged write survives a process kill.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .geo_model import SceneState, scene_hash
from .protocol import GeoAnchor, SchemaViolation

logger = logging.getLogger(__name__)

MAX_COMMENT_CHARS = 4000
MAX_TITLE_CHARS = 200
LOG_FILENAME = "review.jsonl"


class ReviewError(Exception):
    code = "review_error"


class UnknownSolution(ReviewError):
    code = "unknown_solution"


class UnknownParent(ReviewError):
    code = "unknown_parent"


class UnknownComment(ReviewError):
    code = "unknown_comment"


class ValidationError(ReviewError):
    code = "validation_error"


class StoreFailure(ReviewError):
    code = "store_failure"


@dataclass(frozen=True)
class SolutionRecord:
    solution_id: str
    version: int
    title: str
    scene: dict[str, Any]
    published_at: int
    source_session: str
    scene_sha256: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "solution_id": self.solution_id,
            "version": self.version,
            "title": self.title,
            "scene": self.scene,
            "published_at": self.published_at,
            "source_session": self.source_session,
            "scene_sha256": self.scene_sha256,
        }

    def summary(self) -> dict[str, Any]:
        return {
            "solution_id": self.solution_id,
            "version": self.version,
            "title": self.title,
            "published_at": self.published_at,
            "source_session": self.source_session,
        }


@dataclass
class Comment:
    comment_id: str
    solution_id: str
    version: int
    author: str
    text: str
    anchor: GeoAnchor
    created_at: int
    parent_id: str | None = None
    status: str = "open"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "comment_id": self.comment_id,
            "solution_id": self.solution_id,
            "version": self.version,
            "author": self.author,
            "text": self.text,
            "anchor": self.anchor.to_dict(),
            "created_at": self.created_at,
            "status": self.status,
        }
        if self.parent_id is not None:
            out["parent_id"] = self.parent_id
        return out


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive lat/lon rectangle; west/south/east/north in degrees."""

    west: float
    south: float
    east: float
    north: float

    def __post_init__(self):
        if not (-180.0 <= self.west < 180.0 and -180.0 <= self.east < 180.0):
            raise ValidationError("bbox longitudes must be within [-180, 180)")
        if not (-90.0 <= self.south <= 90.0 and -90.0 <= self.north <= 90.0):
            raise ValidationError("bbox latitudes must be within [-90, 90]")
        if self.south > self.north or self.west > self.east:
            raise ValidationError("bbox must be west,south,east,north with west<=east and south<=north")

    @classmethod
    def parse(cls, raw: str) -> "BoundingBox":
        parts = raw.split(",")
        if len(parts) != 4:
            raise ValidationError("bbox must be 'west,south,east,north'")
        try:
            west, south, east, north = (float(p) for p in parts)
        except ValueError as exc:
            raise ValidationError(f"bbox values must be numbers: {exc}") from exc
        return cls(west=west, south=south, east=east, north=north)

    def contains(self, anchor: GeoAnchor) -> bool:
        return self.south <= anchor.lat <= self.north and self.west <= anchor.lon <= self.east


def _now_ms() -> int:
    return int(time.time() * 1000)


class ReviewStore:
    """Durable store: append-only log plus replayed in-memory index.

    Writes are serialized by a lock (single appender); reads take the same
    lock briefly to copy references. Safe to share across request threads.
    """

    def __init__(self, directory: str | Path, *, clock: Callable[[], int] = _now_ms):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.log_path = self.directory / LOG_FILENAME
        self._clock = clock
        self._lock = threading.Lock()
        self._solutions: dict[tuple[str, int], SolutionRecord] = {}
        self._latest_version: dict[str, int] = {}
        self._by_session_title: dict[tuple[str, str], str] = {}
        self._comments: dict[str, Comment] = {}
        self._comment_order: list[str] = []
        self._replay_log()
        self._log_file = open(self.log_path, "a", encoding="utf-8")

    # --- persistence ---------------------------------------------------------

    def _replay_log(self) -> None:
        if not self.log_path.exists():
            return
        count = 0
        with open(self.log_path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    self._index_record(record)
                    count += 1
                except (json.JSONDecodeError, KeyError, TypeError, SchemaViolation) as exc:
                    # a torn final line from a crash mid-append is expected; anything
                    # earlier would mean corruption, so log loudly either way
                    logger.warning("skipping unreadable log line %d: %s", line_no, exc)
        logger.info("review store replayed %d records from %s", count, self.log_path)

    def _index_record(self, record: dict[str, Any]) -> None:
        rtype = record["t"]
        if rtype == "solution":
            rec = SolutionRecord(
                solution_id=record["solution_id"],
                version=record["version"],
                title=record["title"],
                scene=record["scene"],
                published_at=record["published_at"],
                source_session=record["source_session"],
                scene_sha256=record["scene_sha256"],
            )
            self._solutions[(rec.solution_id, rec.version)] = rec
            self._latest_version[rec.solution_id] = max(
                self._latest_version.get(rec.solution_id, 0), rec.version
            )
            self._by_session_title[(rec.source_session, rec.title)] = rec.solution_id
        elif rtype == "comment":
            comment = Comment(
                comment_id=record["comment_id"],
                solution_id=record["solution_id"],
                version=record["version"],
                author=record["author"],
                text=record["text"],
                anchor=GeoAnchor.from_dict(record["anchor"]),
                created_at=record["created_at"],
                parent_id=record.get("parent_id"),
                status=record.get("status", "open"),
            )
            self._comments[comment.comment_id] = comment
            self._comment_order.append(comment.comment_id)
        elif rtype == "status":
            comment = self._comments.get(record["comment_id"])
            if comment is not None:
                comment.status = record["status"]
        else:
            logger.warning("unknown record type %r in review log", rtype)

    def _append(self, record: dict[str, Any]) -> None:
        try:
            self._log_file.write(json.dumps(record, ensure_ascii=False) + "\n")
            self._log_file.flush()
            os.fsync(self._log_file.fileno())
        except OSError as exc:
            raise StoreFailure(f"append failed: {exc}") from exc

    def close(self) -> None:
        self._log_file.close()

    # --- operations ------------------------------------------------------------

    def publish_solution(self, source_session: str, title: str, scene: SceneState | dict[str, Any]) -> tuple[str, int]:
        """Persist a published scene; same session+title revises to the next version."""
        if not isinstance(title, str) or not title.strip():
            raise ValidationError("title must be a non-empty string")
        if len(title) > MAX_TITLE_CHARS:
            raise ValidationError(f"title exceeds {MAX_TITLE_CHARS} characters")
        if not isinstance(source_session, str) or not source_session:
            raise ValidationError("source_session must be a non-empty string")
        scene_obj = scene if isinstance(scene, SceneState) else SceneState.from_dict(scene)
        digest = scene_hash(scene_obj).hex()

        with self._lock:
            solution_id = self._by_session_title.get((source_session, title))
            if solution_id is None:
                solution_id = f"sol-{uuid.uuid4().hex[:12]}"
                version = 1
            else:
                version = self._latest_version[solution_id] + 1
            record = SolutionRecord(
                solution_id=solution_id,
                version=version,
                title=title,
                scene=scene_obj.to_dict(),
                published_at=self._clock(),
                source_session=source_session,
                scene_sha256=digest,
            )
            self._append({"t": "solution", **record.to_dict()})
            self._solutions[(solution_id, version)] = record
            self._latest_version[solution_id] = version
            self._by_session_title[(source_session, title)] = solution_id
            logger.info("published %s v%d (%r) from session %s", solution_id, version, title, source_session)
            return solution_id, version

    def get_solution(self, solution_id: str, version: int) -> SolutionRecord:
        record = self._solutions.get((solution_id, version))
        if record is None:
            raise UnknownSolution(f"no solution {solution_id!r} version {version}")
        return record

    def latest_version(self, solution_id: str) -> int:
        version = self._latest_version.get(solution_id)
        if version is None:
            raise UnknownSolution(f"no solution {solution_id!r}")
        return version

    def list_solutions(self) -> list[dict[str, Any]]:
        with self._lock:
            out = []
            for solution_id, latest in sorted(self._latest_version.items()):
                record = self._solutions[(solution_id, latest)]
                out.append({**record.summary(), "latest_version": latest, "version": latest})
            return out

    def post_comment(
        self,
        solution_id: str,
        version: int,
        author: str,
        text: str,
        anchor: GeoAnchor | dict[str, Any],
        parent_id: str | None = None,
    ) -> str:
        """Durably persist one comment and return its id."""
        if (solution_id, version) not in self._solutions:
            raise UnknownSolution(f"no solution {solution_id!r} version {version}")
        if not isinstance(text, str) or not text:
            raise ValidationError("comment text must be non-empty")
        if len(text) > MAX_COMMENT_CHARS:
            raise ValidationError(f"comment text exceeds {MAX_COMMENT_CHARS} characters")
        if not isinstance(author, str) or not author.strip():
            author = "anonymous"
        try:
            anchor_obj = anchor if isinstance(anchor, GeoAnchor) else GeoAnchor.from_dict(anchor)
        except SchemaViolation as exc:
            raise ValidationError(f"bad anchor: {exc}") from exc

        with self._lock:
            if parent_id is not None:
                parent = self._comments.get(parent_id)
                if parent is None or parent.solution_id != solution_id:
                    raise UnknownParent(f"parent {parent_id!r} does not exist on solution {solution_id!r}")
            comment = Comment(
                comment_id=f"c-{uuid.uuid4().hex[:12]}",
                solution_id=solution_id,
                version=version,
                author=author,
                text=text,
                anchor=anchor_obj,
                created_at=self._clock(),
                parent_id=parent_id,
            )
            self._append({"t": "comment", **comment.to_dict()})
            self._comments[comment.comment_id] = comment
            self._comment_order.append(comment.comment_id)
            return comment.comment_id

    def list_comments(
        self,
        solution_id: str,
        version: int | None = None,
        bbox: BoundingBox | None = None,
        since: int | None = None,
        status: str | None = None,
    ) -> list[Comment]:
        """Comments matching every supplied predicate, ordered by created_at."""
        if solution_id not in self._latest_version:
            raise UnknownSolution(f"no solution {solution_id!r}")
        if status is not None and status not in ("open", "addressed"):
            raise ValidationError(f"unknown status {status!r}")
        with self._lock:
            ordered = [self._comments[cid] for cid in self._comment_order]
        out = []
        for comment in ordered:
            if comment.solution_id != solution_id:
                continue
            if version is not None and comment.version != version:
                continue
            if bbox is not None and not bbox.contains(comment.anchor):
                continue
            if since is not None and comment.created_at < since:
                continue
            if status is not None and comment.status != status:
                continue
            out.append(comment)
        out.sort(key=lambda c: c.created_at)
        return out

    def get_comment(self, comment_id: str) -> Comment:
        comment = self._comments.get(comment_id)
        if comment is None:
            raise UnknownComment(f"no comment {comment_id!r}")
        return comment

    def set_comment_status(self, comment_id: str, status: str) -> Comment:
        """Idempotently mark a comment open/addressed."""
        if status not in ("open", "addressed"):
            raise ValidationError(f"status must be 'open' or 'addressed', got {status!r}")
        with self._lock:
            comment = self._comments.get(comment_id)
            if comment is None:
                raise UnknownComment(f"no comment {comment_id!r}")
            if comment.status != status:
                self._append({"t": "status", "comment_id": comment_id, "status": status, "ts": self._clock()})
                comment.status = status
            return comment

    def export_comments(self, solution_id: str, version: int | None = None) -> dict[str, Any]:
        """Export document for loading a review round back into a design session."""
        latest = self.latest_version(solution_id)
        comments = self.list_comments(solution_id, version=version)
        return {
            "solution_id": solution_id,
            "version": version,
            "latest_version": latest,
            "exported_at": self._clock(),
            "count": len(comments),
            "comments": [c.to_dict() for c in comments],
        }
