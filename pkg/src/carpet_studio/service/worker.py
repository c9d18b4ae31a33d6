"""Worker pool: pulls queued jobs FIFO and runs the pipeline on threads."""

from __future__ import annotations

import os
import threading
import traceback

from .. import pipeline as pl
from ..errors import CarpetStudioError, StageFailureError
from ..image_io import encode_png, load_image_bytes


class JobCancelled(Exception):
    pass


def default_worker_count():
    return max(1, (os.cpu_count() or 2) // 2)


class WorkerPool:
    def __init__(self, store, models, count=None, poll_interval=0.2):
        self.store = store
        self.models = models
        self.count = count or default_worker_count()
        self.poll_interval = poll_interval
        self._stop = threading.Event()
        self._threads = []

    def start(self):
        for i in range(self.count):
            t = threading.Thread(target=self._loop, name=f"carpet-worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self, timeout=5.0):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=timeout)

    def _loop(self):
        while not self._stop.is_set():
            job = self.store.claim_next_queued()
            if job is None:
                self._stop.wait(self.poll_interval)
                continue
            self._run_job(job)

    def _asset_loader(self, ref):
        if "asset" in ref:
            return load_image_bytes(self.store.asset_bytes(ref["asset"]))
        return pl.default_asset_loader(ref)

    def _run_job(self, job):
        job_id = job["id"]
        cfg = pl.parse_config(job["config"])
        weights = pl.stage_iteration_counts(cfg)
        total = sum(weights.values())
        done_before = {}
        acc = 0
        for stage, units in weights.items():
            done_before[stage] = acc
            acc += units
        frames = []
        preview_every = cfg.preview_every

        def progress(stage, iteration, loss, image):
            done = done_before.get(stage, 0) + min(iteration + 1, weights.get(stage, 1))
            if image is not None and preview_every and iteration % preview_every == 0:
                ordinal = len(frames)
                self.store.write_frame(job_id, ordinal, iteration, encode_png(image))
                frames.append({"ordinal": ordinal, "stage": stage, "iteration": iteration})
            status = self.store.update_running(
                job_id, stage=stage, progress=done / total,
                frames=frames if image is not None else None,
            )
            if status != "running":
                raise JobCancelled(job_id)

        try:
            out_dir = os.path.join(self.store.data_dir, "jobs", job_id)
            arts = pl.run_pipeline(
                cfg, models=self.models, asset_loader=self._asset_loader,
                out_dir=out_dir, progress=progress,
            )
            refs = {}
            for name, img in (("i_o1", arts.i_o1), ("i_o2", arts.i_o2),
                              ("i_final", arts.i_final)):
                rec = self.store.add_asset(encode_png(img), kind="artifact")
                refs[name] = rec["id"]
            self.store.finish_job(job_id, "succeeded", artifacts=refs)
        except StageFailureError as e:
            if isinstance(e.cause, JobCancelled):
                return  # terminal state was already written by cancel
            self.store.finish_job(job_id, "failed", error=str(e))
        except JobCancelled:
            return
        except CarpetStudioError as e:
            self.store.finish_job(job_id, "failed", error=str(e))
        except Exception as e:  # surface unexpected bugs in the record
            traceback.print_exc()
            self.store.finish_job(job_id, "failed", error=f"internal error: {e}")
