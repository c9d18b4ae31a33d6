import json
import os

import numpy as np
import pytest

from carpet_studio import pipeline as pl
from carpet_studio import style_swap, synthetic
from carpet_studio.errors import StageFailureError, ValidationError
from carpet_studio.image_io import save_image, to_grayscale


@pytest.fixture()
def asset_dir(tmp_path):
    paths = {}
    for name, img in [
        ("content", synthetic.make_carpet_map(1, 96)),
        ("style1", synthetic.make_texture(2, 96)),
        ("style2", synthetic.make_texture(3, 96)),
        ("color", synthetic.make_texture(4, 96)),
    ]:
        p = tmp_path / f"{name}.png"
        save_image(img, str(p))
        paths[name] = str(p)
    return paths


def base_doc(paths, **over):
    doc = {
        "content": {"path": paths["content"]},
        "style1": {"path": paths["style1"]},
        "style2": {"path": paths["style2"]},
        "colorSource": {"path": paths["color"]},
        "secondMethod": "Gatys",
        "coloringMethod": "Gatys",
        "gatys": {"iterations": 2},
        "seed": 5,
    }
    doc.update(over)
    return doc


class TestValidation:
    def test_valid_doc(self, asset_dir):
        assert pl.validate_config(base_doc(asset_dir)) == {}

    def test_clipstyler_second_requires_text(self, asset_dir):
        doc = base_doc(asset_dir, secondMethod="ClipStyler")
        errs = pl.validate_config(doc)
        assert "style2" in errs
        doc["style2"] = {"text": "geometric lattice"}
        assert pl.validate_config(doc) == {}

    def test_image_method_rejects_text(self, asset_dir):
        doc = base_doc(asset_dir)
        doc["style2"] = {"text": "nope"}
        assert "style2" in pl.validate_config(doc)

    def test_clipstyler_coloring_requires_text(self, asset_dir):
        doc = base_doc(asset_dir, coloringMethod="ClipStyler")
        assert "colorSource" in pl.validate_config(doc)

    def test_chain_aliases(self, asset_dir):
        doc = base_doc(asset_dir)
        del doc["secondMethod"]
        doc["chain"] = "Swap-Swap"
        assert pl.validate_config(doc) == {}
        assert pl.parse_config(doc).second_method == "StyleSwap"

    def test_chain_conflict(self, asset_dir):
        doc = base_doc(asset_dir, chain="Swap-Clip")
        assert "chain" in pl.validate_config(doc)

    def test_stride_bound(self, asset_dir):
        doc = base_doc(asset_dir, swap={"patchSize": 3, "stride": 4})
        assert "swap.stride" in pl.validate_config(doc)

    def test_unknown_fields_rejected(self, asset_dir):
        doc = base_doc(asset_dir, bogus=1)
        assert "bogus" in pl.validate_config(doc)
        doc = base_doc(asset_dir, gatys={"iterations": 2, "warp": 1})
        assert "gatys.warp" in pl.validate_config(doc)

    def test_missing_required(self):
        errs = pl.validate_config({})
        for fld in ("content", "style1", "style2", "colorSource"):
            assert fld in errs

    def test_bad_ref_shape(self, asset_dir):
        doc = base_doc(asset_dir, content={"path": "x", "asset": "y"})
        assert "content" in pl.validate_config(doc)

    def test_roundtrip_doc(self, asset_dir):
        doc = base_doc(asset_dir)
        cfg = pl.parse_config(doc)
        doc2 = pl.config_to_doc(cfg)
        assert pl.validate_config(doc2) == {}
        assert pl.parse_config(doc2) == cfg


class TestGenerate:
    def test_second_stage_self_swap_fixed_point(self, models):
        content = synthetic.make_carpet_map(1, 96)
        style1 = synthetic.make_texture(2, 96)
        cfg = pl.parse_config({
            "content": {"path": "x"}, "style1": {"path": "x"},
            "style2": {"path": "x"}, "colorSource": {"path": "x"},
            "secondMethod": "StyleSwap",
        })
        i_o1 = style_swap.run_style_swap(content, style1, cfg.swap, models=models)
        _, i_o2, _ = pl.generate(content, style1, i_o1, "StyleSwap", cfg, models)
        recon = models.decoder.decode(
            models.encoder.encode(i_o1, ["conv4_1"])["conv4_1"])
        assert np.abs(i_o2 - to_grayscale(recon)).mean() <= 1e-4

    def test_zero_iteration_gatys_second_stage(self, models):
        content = synthetic.make_carpet_map(1, 96)
        style1 = synthetic.make_texture(2, 96)
        style2 = synthetic.make_texture(3, 96)
        cfg = pl.parse_config({
            "content": {"path": "x"}, "style1": {"path": "x"},
            "style2": {"path": "x"}, "colorSource": {"path": "x"},
            "gatys": {"iterations": 0},
        })
        i_o1, i_o2, _ = pl.generate(content, style1, style2, "Gatys", cfg, models)
        assert np.array_equal(i_o2, to_grayscale(i_o1))

    def test_output_is_exactly_grayscale(self, models):
        content = synthetic.make_carpet_map(1, 64)
        cfg = pl.parse_config({
            "content": {"path": "x"}, "style1": {"path": "x"},
            "style2": {"path": "x"}, "colorSource": {"path": "x"},
            "gatys": {"iterations": 2},
        })
        _, i_o2, _ = pl.generate(content, synthetic.make_texture(2, 64),
                                 synthetic.make_texture(3, 64), "Gatys", cfg, models)
        assert np.array_equal(i_o2[:, :, 0], i_o2[:, :, 1])
        assert np.array_equal(i_o2[:, :, 1], i_o2[:, :, 2])


class TestColorize:
    def test_zero_iterations_noop(self, models):
        gray = to_grayscale(synthetic.make_carpet_map(3, 64))
        source = synthetic.make_texture(5, 64)
        cfg = pl.parse_config({
            "content": {"path": "x"}, "style1": {"path": "x"},
            "style2": {"path": "x"}, "colorSource": {"path": "x"},
            "gatys": {"iterations": 0},
        })
        out, _ = pl.colorize(gray, source, "Gatys", cfg, models)
        assert np.array_equal(out, gray)

    def test_cams_with_gray_style_stays_near_gray(self, models):
        gray = to_grayscale(synthetic.make_carpet_map(3, 64))
        gray_style = to_grayscale(synthetic.make_texture(5, 64))
        cfg = pl.parse_config({
            "content": {"path": "x"}, "style1": {"path": "x"},
            "style2": {"path": "x"}, "colorSource": {"path": "x"},
            "cams": {"iterations": 15, "paletteSize": 3},
        })
        out, _ = pl.colorize(gray, gray_style, "Cams", cfg, models)
        spread = (out.max(axis=2) - out.min(axis=2)).mean()
        assert spread <= 0.1


class TestRunPipeline:
    def test_full_run_and_artifacts(self, models, asset_dir, tmp_path):
        out_dir = str(tmp_path / "out")
        arts = pl.run_pipeline(base_doc(asset_dir), models=models, out_dir=out_dir)
        for name in ("i_o1.png", "i_o2.png", "i_final.png", "artifacts.json"):
            assert os.path.exists(os.path.join(out_dir, name))
        meta = json.load(open(os.path.join(out_dir, "artifacts.json")))
        assert meta["config"]["seed"] == 5
        assert set(meta["timings"]) == {"generate", "colorize"}
        assert np.array_equal(arts.i_o2[:, :, 0], arts.i_o2[:, :, 2])

    def test_deterministic_replay_from_snapshot(self, models, asset_dir):
        arts1 = pl.run_pipeline(base_doc(asset_dir), models=models)
        arts2 = pl.run_pipeline(arts1.config_snapshot, models=models)
        assert np.array_equal(arts1.i_final, arts2.i_final)

    def test_invalid_config_raises_before_compute(self, asset_dir):
        doc = base_doc(asset_dir, secondMethod="ClipStyler")  # image style2
        with pytest.raises(ValidationError) as exc:
            pl.run_pipeline(doc)
        assert "style2" in exc.value.field_errors

    def test_stage_failure_tags_stage_and_keeps_artifacts(
            self, models, asset_dir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("synthetic colorize failure")

        monkeypatch.setattr(pl, "run_gatys", boom)
        doc = base_doc(asset_dir, secondMethod="StyleSwap")
        out_dir = str(tmp_path / "partial")
        with pytest.raises(StageFailureError) as exc:
            pl.run_pipeline(doc, models=models, out_dir=out_dir)
        assert exc.value.stage == "colorize"
        assert os.path.exists(os.path.join(out_dir, "i_o1.png"))
        assert os.path.exists(os.path.join(out_dir, "i_o2.png"))
        assert not os.path.exists(os.path.join(out_dir, "i_final.png"))

    def test_three_chains_give_distinct_maps(self, models, asset_dir):
        docs = {
            "Swap-Gatys": base_doc(asset_dir, secondMethod="Gatys",
                                   gatys={"iterations": 5}),
            "Swap-Swap": base_doc(asset_dir, secondMethod="StyleSwap",
                                  gatys={"iterations": 5}),
            "Swap-Clip": base_doc(asset_dir, secondMethod="ClipStyler",
                                  style2={"text": "dense floral lattice"},
                                  gatys={"iterations": 5},
                                  clipStyler={"iterations": 25, "cropCount": 6,
                                              "cropSize": 16, "stepSize": 0.02}),
        }
        outs = {}
        for name, doc in docs.items():
            outs[name] = pl.run_pipeline(doc, models=models).i_o2
        pairs = [("Swap-Gatys", "Swap-Swap"), ("Swap-Gatys", "Swap-Clip"),
                 ("Swap-Swap", "Swap-Clip")]
        for a, b in pairs:
            assert np.abs(outs[a] - outs[b]).mean() > 0.01
