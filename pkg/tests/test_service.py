import socket
import threading
import time

import httpx
import numpy as np
import pytest
import uvicorn

from carpet_studio import synthetic
from carpet_studio.image_io import encode_png
from carpet_studio.service.app import create_app
from carpet_studio.service.store import Store


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveServer:
    def __init__(self, data_dir, **kwargs):
        self.port = _free_port()
        self.app = create_app(data_dir=data_dir, **kwargs)
        config = uvicorn.Config(self.app, host="127.0.0.1", port=self.port,
                                log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    @property
    def base(self):
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 15
        while time.time() < deadline:
            try:
                httpx.get(self.base + "/api/health", timeout=1).raise_for_status()
                return self
            except Exception:
                time.sleep(0.05)
        raise RuntimeError("service did not come up")

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    data_dir = str(tmp_path_factory.mktemp("service-data"))
    with LiveServer(data_dir, worker_count=1) as srv:
        yield srv


def _upload(base, img, kind="style", name="img.png"):
    r = httpx.post(base + "/api/assets",
                   files={"file": (name, encode_png(img), "image/png")},
                   data={"kind": kind})
    assert r.status_code == 201, r.text
    return r.json()


def _job_doc(ids, **over):
    doc = {
        "content": {"asset": ids["content"]},
        "style1": {"asset": ids["style1"]},
        "style2": {"asset": ids["style2"]},
        "colorSource": {"asset": ids["color"]},
        "secondMethod": "Gatys",
        "coloringMethod": "Gatys",
        "gatys": {"iterations": 2},
        "seed": 1,
    }
    doc.update(over)
    return doc


@pytest.fixture(scope="module")
def asset_ids(live):
    imgs = {
        "content": synthetic.make_carpet_map(1, 64),
        "style1": synthetic.make_texture(2, 64),
        "style2": synthetic.make_texture(3, 64),
        "color": synthetic.make_texture(4, 64),
    }
    return {k: _upload(live.base, v, name=f"{k}.png")["id"] for k, v in imgs.items()}


def _wait_terminal(base, job_id, timeout=180):
    deadline = time.time() + timeout
    while time.time() < deadline:
        j = httpx.get(f"{base}/api/jobs/{job_id}").json()
        if j["status"] in ("succeeded", "failed"):
            return j
        time.sleep(0.3)
    raise TimeoutError(job_id)


class TestAssets:
    def test_round_trip_bytes_identical(self, live):
        data = encode_png(synthetic.make_texture(9, 48))
        r = httpx.post(live.base + "/api/assets",
                       files={"file": ("t.png", data, "image/png")},
                       data={"kind": "content"})
        assert r.status_code == 201
        rec = r.json()
        back = httpx.get(f"{live.base}/api/assets/{rec['id']}")
        assert back.status_code == 200
        assert back.content == data

    def test_zero_byte_upload_rejected(self, live):
        r = httpx.post(live.base + "/api/assets",
                       files={"file": ("empty.png", b"", "image/png")})
        assert r.status_code == 415

    def test_garbage_bytes_rejected(self, live):
        r = httpx.post(live.base + "/api/assets",
                       files={"file": ("x.png", b"not an image", "image/png")})
        assert r.status_code == 415

    def test_unknown_asset_404(self, live):
        r = httpx.get(live.base + "/api/assets/no-such-id")
        assert r.status_code == 404

    def test_oversized_rejected(self, tmp_path):
        store = Store(str(tmp_path), max_asset_bytes=100)
        from carpet_studio.errors import TooLargeError

        with pytest.raises(TooLargeError):
            store.add_asset(b"\x89PNG\r\n\x1a\n" + b"0" * 200)


class TestJobLifecycle:
    def test_submit_poll_fetch_round_trip(self, live, asset_ids):
        r = httpx.post(live.base + "/api/jobs", json=_job_doc(asset_ids))
        assert r.status_code == 201
        job = r.json()
        assert job["status"] == "queued"
        assert job["progress"] == 0
        done = _wait_terminal(live.base, job["id"])
        assert done["status"] == "succeeded", done["error"]
        assert set(done["artifacts"]) == {"i_o1", "i_o2", "i_final"}
        img = httpx.get(f"{live.base}/api/assets/{done['artifacts']['i_final']}")
        assert img.status_code == 200 and img.content[:4] == b"\x89PNG"

    def test_validation_error_names_field(self, live, asset_ids):
        doc = _job_doc(asset_ids, secondMethod="ClipStyler")  # image style2
        r = httpx.post(live.base + "/api/jobs", json=doc)
        assert r.status_code == 422
        assert "style2" in r.json()["errors"]

    def test_unknown_asset_rejected(self, live, asset_ids):
        doc = _job_doc(asset_ids)
        doc["style1"] = {"asset": "does-not-exist"}
        r = httpx.post(live.base + "/api/jobs", json=doc)
        assert r.status_code == 422
        assert "style1" in r.json()["errors"]

    def test_two_submissions_distinct_ids(self, live, asset_ids):
        doc = _job_doc(asset_ids, gatys={"iterations": 0})
        a = httpx.post(live.base + "/api/jobs", json=doc).json()
        b = httpx.post(live.base + "/api/jobs", json=doc).json()
        assert a["id"] != b["id"]

    def test_get_unknown_job_404(self, live):
        assert httpx.get(live.base + "/api/jobs/nope").status_code == 404

    def test_preview_frames_ordered(self, live, asset_ids):
        doc = _job_doc(asset_ids, previewEvery=1, gatys={"iterations": 3})
        job = httpx.post(live.base + "/api/jobs", json=doc).json()
        done = _wait_terminal(live.base, job["id"])
        assert done["status"] == "succeeded"
        frames = done["frames"]
        assert len(frames) >= 3
        assert [f["ordinal"] for f in frames] == sorted(f["ordinal"] for f in frames)
        by_stage = {}
        for f in frames:
            by_stage.setdefault(f["stage"], []).append(f["iteration"])
        for its in by_stage.values():
            assert its == sorted(its)
        r = httpx.get(f"{live.base}/api/jobs/{job['id']}/frames/0")
        assert r.status_code == 200 and r.content[:4] == b"\x89PNG"
        missing = httpx.get(f"{live.base}/api/jobs/{job['id']}/frames/999")
        assert missing.status_code == 404


class TestCancellation:
    def test_cancel_queued_job(self, tmp_path):
        # workers off: the job stays queued until cancelled
        with LiveServer(str(tmp_path / "d1"), start_workers=False) as srv:
            ids = {k: _upload(srv.base, synthetic.make_texture(i, 48), name=f"{k}.png")["id"]
                   for i, k in enumerate(["content", "style1", "style2", "color"])}
            job = httpx.post(srv.base + "/api/jobs", json=_job_doc(ids)).json()
            listed = httpx.get(srv.base + "/api/jobs", params={"status": "running"}).json()
            assert listed == []
            r = httpx.post(f"{srv.base}/api/jobs/{job['id']}/cancel")
            assert r.json()["status"] == "failed"
            assert r.json()["error"] == "cancelled"
            again = httpx.post(f"{srv.base}/api/jobs/{job['id']}/cancel")
            assert again.json()["status"] == "failed"
            assert again.json()["updated"] == r.json()["updated"]

    def test_cancel_succeeded_job_is_noop(self, live, asset_ids):
        doc = _job_doc(asset_ids, gatys={"iterations": 0})
        job = httpx.post(live.base + "/api/jobs", json=doc).json()
        done = _wait_terminal(live.base, job["id"])
        assert done["status"] == "succeeded"
        r = httpx.post(f"{live.base}/api/jobs/{job['id']}/cancel")
        assert r.json()["status"] == "succeeded"

    def test_cancel_running_job_stops_worker(self, live, asset_ids):
        doc = _job_doc(asset_ids, gatys={"iterations": 60})
        job = httpx.post(live.base + "/api/jobs", json=doc).json()
        deadline = time.time() + 60
        while time.time() < deadline:
            j = httpx.get(f"{live.base}/api/jobs/{job['id']}").json()
            if j["status"] == "running":
                break
            time.sleep(0.1)
        assert j["status"] == "running"
        httpx.post(f"{live.base}/api/jobs/{job['id']}/cancel")
        done = _wait_terminal(live.base, job["id"])
        assert done["status"] == "failed"
        assert done["error"] == "cancelled"


class TestRecovery:
    def test_restart_fails_stale_running_jobs(self, tmp_path):
        data_dir = str(tmp_path / "recover")
        store = Store(data_dir)
        rec = store.add_asset(encode_png(synthetic.make_texture(0, 48)))
        doc = {
            "content": {"asset": rec["id"]}, "style1": {"asset": rec["id"]},
            "style2": {"asset": rec["id"]}, "colorSource": {"asset": rec["id"]},
        }
        job = store.submit_job(doc)
        claimed = store.claim_next_queued()
        assert claimed["status"] == "running"
        store.close()

        # a fresh service over the same data dir simulates the restart
        with LiveServer(data_dir, start_workers=False) as srv:
            j = httpx.get(f"{srv.base}/api/jobs/{job['id']}").json()
            assert j["status"] == "failed"
            assert "restart" in j["error"]
            running = httpx.get(srv.base + "/api/jobs", params={"status": "running"}).json()
            assert running == []

    def test_terminal_jobs_survive_restart(self, tmp_path):
        data_dir = str(tmp_path / "persist")
        store = Store(data_dir)
        rec = store.add_asset(encode_png(synthetic.make_texture(1, 48)))
        doc = {
            "content": {"asset": rec["id"]}, "style1": {"asset": rec["id"]},
            "style2": {"asset": rec["id"]}, "colorSource": {"asset": rec["id"]},
        }
        job = store.submit_job(doc)
        store.finish_job(job["id"], "succeeded", artifacts={"i_final": rec["id"]})
        store.close()
        with LiveServer(data_dir, start_workers=False) as srv:
            j = httpx.get(f"{srv.base}/api/jobs/{job['id']}").json()
            assert j["status"] == "succeeded"
            assert j["artifacts"] == {"i_final": rec["id"]}
            asset = httpx.get(f"{srv.base}/api/assets/{rec['id']}")
            assert asset.status_code == 200


class TestJobRecordInvariants:
    def test_progress_monotone_under_updates(self, tmp_path):
        store = Store(str(tmp_path))
        rec = store.add_asset(encode_png(synthetic.make_texture(2, 48)))
        doc = {"content": {"asset": rec["id"]}, "style1": {"asset": rec["id"]},
               "style2": {"asset": rec["id"]}, "colorSource": {"asset": rec["id"]}}
        job = store.submit_job(doc)
        store.claim_next_queued()
        store.update_running(job["id"], progress=0.5)
        store.update_running(job["id"], progress=0.3)  # must not regress
        assert store.get_job(job["id"])["progress"] == 0.5

    def test_finish_does_not_override_terminal(self, tmp_path):
        store = Store(str(tmp_path))
        rec = store.add_asset(encode_png(synthetic.make_texture(3, 48)))
        doc = {"content": {"asset": rec["id"]}, "style1": {"asset": rec["id"]},
               "style2": {"asset": rec["id"]}, "colorSource": {"asset": rec["id"]}}
        job = store.submit_job(doc)
        store.cancel_job(job["id"])
        out = store.finish_job(job["id"], "succeeded")
        assert out["status"] == "failed"
        assert out["error"] == "cancelled"
