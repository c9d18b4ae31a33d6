"""Persistence for the studio service: job records plus an asset store.

Records live in an embedded sqlite database; asset bytes live in a
content-addressed file tree next to it.  All writes go through one guarded
connection, which serializes job-state mutations; artifact and asset files
are written to a temp name and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import sqlite3
import threading
import time
import uuid

from ..errors import NotFoundError, TooLargeError, UnsupportedFormatError
from ..image_io import load_image_bytes

DEFAULT_MAX_ASSET_BYTES = 16 * 1024 * 1024

_SCHEMA = """
CREATE TABLE IF NOT EXISTS assets (
    id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    media_type TEXT NOT NULL,
    byte_size INTEGER NOT NULL,
    checksum TEXT NOT NULL,
    stored_path TEXT NOT NULL,
    created REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    id TEXT PRIMARY KEY,
    config TEXT NOT NULL,
    status TEXT NOT NULL,
    stage TEXT,
    progress REAL NOT NULL DEFAULT 0,
    error TEXT,
    artifacts TEXT,
    frames TEXT NOT NULL DEFAULT '[]',
    created REAL NOT NULL,
    updated REAL NOT NULL,
    heartbeat REAL
);
"""

TERMINAL = ("succeeded", "failed")


def _sniff_media_type(data):
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return "image/png"
    if data[:3] == b"\xff\xd8\xff":
        return "image/jpeg"
    return None


class Store:
    def __init__(self, data_dir, max_asset_bytes=DEFAULT_MAX_ASSET_BYTES):
        self.data_dir = data_dir
        self.max_asset_bytes = max_asset_bytes
        os.makedirs(os.path.join(data_dir, "assets"), exist_ok=True)
        os.makedirs(os.path.join(data_dir, "jobs"), exist_ok=True)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(
            os.path.join(data_dir, "studio.db"), check_same_thread=False
        )
        self._db.row_factory = sqlite3.Row
        with self._lock:
            self._db.executescript(_SCHEMA)
            self._db.commit()

    def close(self):
        with self._lock:
            self._db.close()

    # -- assets ------------------------------------------------------------

    def add_asset(self, data, kind="content"):
        if len(data) > self.max_asset_bytes:
            raise TooLargeError(
                f"asset is {len(data)} bytes; limit {self.max_asset_bytes}"
            )
        media_type = _sniff_media_type(data) if data else None
        if media_type is None:
            raise UnsupportedFormatError("asset must be a PNG or JPEG file")
        load_image_bytes(data)  # decodes or raises
        checksum = hashlib.sha256(data).hexdigest()
        rel = os.path.join("assets", checksum[:2], checksum + ".bin")
        path = os.path.join(self.data_dir, rel)
        if not os.path.exists(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = path + f".tmp-{uuid.uuid4().hex}"
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        asset_id = str(uuid.uuid4())
        now = time.time()
        with self._lock:
            self._db.execute(
                "INSERT INTO assets VALUES (?,?,?,?,?,?,?)",
                (asset_id, kind, media_type, len(data), checksum, rel, now),
            )
            self._db.commit()
        return self.get_asset(asset_id)

    def get_asset(self, asset_id):
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM assets WHERE id=?", (asset_id,)
            ).fetchone()
        if row is None:
            raise NotFoundError(f"asset {asset_id} not found")
        return dict(row)

    def asset_bytes(self, asset_id):
        rec = self.get_asset(asset_id)
        with open(os.path.join(self.data_dir, rec["stored_path"]), "rb") as fh:
            return fh.read()

    def asset_exists(self, asset_id):
        with self._lock:
            row = self._db.execute(
                "SELECT 1 FROM assets WHERE id=?", (asset_id,)
            ).fetchone()
        return row is not None

    # -- jobs ----------------------------------------------------------------

    @staticmethod
    def _job_dict(row):
        d = dict(row)
        d["config"] = json.loads(d["config"])
        d["artifacts"] = json.loads(d["artifacts"]) if d["artifacts"] else None
        d["frames"] = json.loads(d["frames"])
        return d

    def submit_job(self, config_doc):
        job_id = str(uuid.uuid4())
        now = time.time()
        with self._lock:
            self._db.execute(
                "INSERT INTO jobs (id, config, status, progress, created, updated)"
                " VALUES (?,?,?,?,?,?)",
                (job_id, json.dumps(config_doc), "queued", 0.0, now, now),
            )
            self._db.commit()
        return self.get_job(job_id)

    def get_job(self, job_id):
        with self._lock:
            row = self._db.execute(
                "SELECT * FROM jobs WHERE id=?", (job_id,)
            ).fetchone()
        if row is None:
            raise NotFoundError(f"job {job_id} not found")
        return self._job_dict(row)

    def list_jobs(self, status=None):
        q = "SELECT * FROM jobs"
        args = ()
        if status:
            q += " WHERE status=?"
            args = (status,)
        q += " ORDER BY created"
        with self._lock:
            rows = self._db.execute(q, args).fetchall()
        return [self._job_dict(r) for r in rows]

    def claim_next_queued(self):
        """Atomically move the oldest queued job to running; None when idle."""
        now = time.time()
        with self._lock:
            row = self._db.execute(
                "SELECT id FROM jobs WHERE status='queued' ORDER BY created LIMIT 1"
            ).fetchone()
            if row is None:
                return None
            self._db.execute(
                "UPDATE jobs SET status='running', updated=?, heartbeat=? "
                "WHERE id=? AND status='queued'",
                (now, now, row["id"]),
            )
            self._db.commit()
        return self.get_job(row["id"])

    def update_running(self, job_id, stage=None, progress=None, frames=None):
        """Progress heartbeat; only applies while the job is still running.

        Progress never decreases.  Returns the job's current status so the
        worker notices cancellation.
        """
        now = time.time()
        with self._lock:
            sets = ["updated=?", "heartbeat=?"]
            args = [now, now]
            if stage is not None:
                sets.append("stage=?")
                args.append(stage)
            if progress is not None:
                sets.append("progress=MAX(progress,?)")
                args.append(float(progress))
            if frames is not None:
                sets.append("frames=?")
                args.append(json.dumps(frames))
            args.append(job_id)
            self._db.execute(
                f"UPDATE jobs SET {', '.join(sets)} WHERE id=? AND status='running'",
                args,
            )
            self._db.commit()
            row = self._db.execute(
                "SELECT status FROM jobs WHERE id=?", (job_id,)
            ).fetchone()
        return row["status"] if row else None

    def finish_job(self, job_id, status, error=None, artifacts=None):
        """Terminal transition; never overwrites an already-terminal status."""
        now = time.time()
        with self._lock:
            self._db.execute(
                "UPDATE jobs SET status=?, error=?, artifacts=?, progress="
                "CASE WHEN ?='succeeded' THEN 1.0 ELSE progress END, updated=? "
                "WHERE id=? AND status IN ('queued','running')",
                (status, error, json.dumps(artifacts) if artifacts else None,
                 status, now, job_id),
            )
            self._db.commit()
        return self.get_job(job_id)

    def cancel_job(self, job_id):
        """queued/running -> failed('cancelled'); idempotent on terminal jobs."""
        job = self.get_job(job_id)
        if job["status"] in TERMINAL:
            return job
        return self.finish_job(job_id, "failed", error="cancelled")

    def recover_stale_running(self):
        """Startup scan: any running job belongs to a dead worker; fail it."""
        now = time.time()
        with self._lock:
            rows = self._db.execute(
                "SELECT id FROM jobs WHERE status='running'"
            ).fetchall()
            for row in rows:
                self._db.execute(
                    "UPDATE jobs SET status='failed', error=?, updated=? "
                    "WHERE id=? AND status='running'",
                    ("worker lost (service restart)", now, row["id"]),
                )
            self._db.commit()
        return [r["id"] for r in rows]

    # -- frames ----------------------------------------------------------------

    def frames_dir(self, job_id):
        return os.path.join(self.data_dir, "jobs", job_id, "frames")

    def write_frame(self, job_id, ordinal, iteration, png_bytes):
        d = self.frames_dir(job_id)
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, f"frame_{ordinal:06d}_it{iteration}.png")
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(png_bytes)
        os.replace(tmp, path)
        return path

    def frame_bytes(self, job_id, k):
        d = self.frames_dir(job_id)
        names = sorted(os.listdir(d)) if os.path.isdir(d) else []
        if not 0 <= k < len(names):
            raise NotFoundError(f"job {job_id} has no frame {k}")
        with open(os.path.join(d, names[k]), "rb") as fh:
            return fh.read()
