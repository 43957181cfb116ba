import numpy as np
import pytest

import caplab


def test_architectures_and_tokenize():
    assert caplab.architectures() == ["genesis", "contexta", "clarity", "focalis"]
    assert caplab.tokenize("A red Square, top-left.") == ["a", "red", "square", "top-left"]


def test_dataset_features_round_trip(tmp_path):
    ds = caplab.gen_dataset(5, grid_h=3, grid_w=4, channels=6, seed=2)
    assert len(ds) == 5
    grid = ds.features(0)
    assert grid.shape == (3, 4, 6) and grid.dtype == np.float32
    caplab.save_features(grid, tmp_path / "g.cfg")
    assert np.array_equal(caplab.load_features(tmp_path / "g.cfg"), grid)
    ds.write(tmp_path / "d")
    back = caplab.load_dataset(tmp_path / "d")
    assert back.references(1) == ds.references(1)
    assert len(back.vocab) == len(ds.vocab)


def test_model_caption_and_training():
    ds = caplab.gen_dataset(6, grid_h=3, grid_w=3, channels=8, refs=1, seed=4)
    model = caplab.build_model("focalis", len(ds.vocab), 8, grid_h=3, grid_w=3, embed_dim=8, units=12, seed=1)
    assert model.arch == "focalis" and model.parameter_count > 0
    caption = ds.vocab.encode_caption(ds.references(0)[0])
    before = model.loss(ds.features(0), caption, epsilon=0.0)
    history = caplab.train(model, ds, ds, epochs=5, lr=0.02, batch_size=6)
    assert [h["epoch"] for h in history] == [1, 2, 3, 4, 5]
    assert model.loss(ds.features(0), caption, epsilon=0.0) < before
    out = model.caption(ds.features(0), beam=3, max_len=10)
    assert len(out["attention"]) == len(out["tokens"])
    assert all(abs(sum(w) - 1.0) < 1e-9 for w in out["attention"])
    assert model.caption(ds.features(0), beam=1)["tokens"] == model.caption(ds.features(0), greedy=True)["tokens"]
    report = model.evaluate(ds, beam=2)
    assert len(report["bleu"]) == 4 and len(report["candidates"]) == 6


def test_metrics():
    assert caplab.corpus_bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) == [1.0, 1.0, 1.0, 1.0]
    s = "a red square at the top".split()
    assert caplab.meteor(s, [s]) == pytest.approx(1 - 0.5 * (1 / 6) ** 3, abs=1e-15)
    assert caplab.select_champion({10: 0.4192, 13: 0.4650, 25: 0.1856}) == 13


def test_errors_map_to_python():
    with pytest.raises(ValueError, match="valid"):
        caplab.build_model("bogus", 10, 4)
    with pytest.raises(caplab.SpecError):
        caplab.parse_spec("[data]\nbogus = 1\n")
    with pytest.raises(caplab.CheckpointError):
        caplab.load_model("/nonexistent.ckpt")
    assert "scenes = 500" in caplab.parse_spec("")
