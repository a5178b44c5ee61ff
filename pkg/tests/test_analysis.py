import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pimt.analysis import (BandPreset, LabeledWindows, ablate_bands, ablate_objectives, ablate_patch, band_presets,
                           mean_saliency, read_table, saliency, scale_study, task_windows, write_table)
from pimt.datagen import SyntheticTaskSpec, synth_task
from pimt.encoder import EncoderConfig
from pimt.errors import ConfigurationError, InvalidParameterError, PatchSizeError
from pimt.heads import FinetuneConfig, FinetuneModel, classify
from pimt.model import BackboneConfig, build_backbone
from pimt.pretrain import OBJECTIVES, PretrainConfig
from pimt.sigproc import default_filter_bank, realize_band
from pimt.tokenization import index_map

ENC = EncoderConfig(n_layers=1, model_dim=8, state_dim=4)
BB = BackboneConfig(n_bands=12, n_channels=1, window_samples=400, patch_samples=100, encoder=ENC)
FT = FinetuneConfig(epochs=1)


class BandReader(FinetuneModel):
    """Classifier that pools only the tokens of one band."""

    def __init__(self, backbone, band):
        super().__init__(backbone, "classification", 2)
        with torch.no_grad():  # identity encoder, so no other token reaches the head
            for block in backbone.encoder.blocks:
                block.fwd.out_proj.weight.zero_()
                block.bwd.out_proj.weight.zero_()
        self.keep = torch.as_tensor(index_map(*backbone.cfg.grid_shape)[:, 0] == band)

    def from_embeddings(self, e):
        return classify(self.backbone.encoder(e)[..., self.keep, :], self.head)


def test_constructed_single_band_model_concentrates_saliency():
    torch.manual_seed(0)
    window = np.random.default_rng(0).standard_normal((12, 1, 400)).astype(np.float32)
    for band in (2, 7):
        smap = saliency(BandReader(build_backbone(BB), band), window)
        assert smap.mass[band] >= 0.99
        assert smap.attribution.shape == (12, 1, 4)


def test_zero_gradient_model_gives_uniform_map():
    model = FinetuneModel(build_backbone(BB), "classification", 2)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    smap = saliency(model, np.ones((12, 1, 400), dtype=np.float32))
    np.testing.assert_allclose(smap.mass, np.full(12, 1 / 12))


@given(st.integers(0, 10_000), st.sampled_from(["classification", "gaze"]))
@settings(max_examples=15, deadline=None)
def test_saliency_is_a_distribution(seed, kind):
    torch.manual_seed(seed)
    model = FinetuneModel(build_backbone(BB), kind, 2)
    window = np.random.default_rng(seed).standard_normal((12, 1, 400)).astype(np.float32)
    smap = saliency(model, window)
    assert np.all(smap.mass >= 0)
    assert abs(smap.mass.sum() - 1) <= 1e-6


def test_mean_saliency_and_rows():
    model = FinetuneModel(build_backbone(BB), "classification", 2)
    windows = np.random.default_rng(1).standard_normal((5, 12, 1, 400)).astype(np.float32)
    names = default_filter_bank().names
    smap = mean_saliency(model, windows, names, batch_size=2)
    assert abs(smap.mass.sum() - 1) <= 1e-6
    expected = np.mean([saliency(model, w).mass for w in windows], axis=0)
    np.testing.assert_allclose(smap.mass, expected, atol=1e-6)
    rows = smap.rows()
    assert [r["band"] for r in rows] == names


# ------------------------------------------------------------- presets and ablations

def test_band_presets_exact():
    presets = band_presets()
    assert list(presets) == ["1-band", "2-band", "4-band", "12-band"]
    edges = {k: [(b.lo, b.hi) for b in p.bank] for k, p in presets.items()}
    assert edges["1-band"] == [(0.1, 75.0)]
    assert edges["2-band"] == [(0.1, 15.0), (15.0, 75.0)]
    assert edges["4-band"] == [(0.1, 5.0), (5.0, 15.0), (15.0, 35.0), (35.0, 75.0)]
    assert presets["12-band"].bank == default_filter_bank()
    for p in list(presets.values())[:3]:
        assert all(realize_band(b, 200.0) == (b.lo, b.hi) for b in p.bank)


@pytest.fixture(scope="module")
def small_task():
    spec = SyntheticTaskSpec(n_channels=1, window_s=2.0)
    return synth_task(spec, 20, seed=0)


def test_task_windows_shapes(small_task):
    lw = task_windows(small_task)
    assert lw.x.shape == (20, 12, 1, 400)
    assert np.array_equal(lw.y, small_task.labels)
    one = task_windows(small_task, band_presets()["1-band"].bank)
    assert one.x.shape == (20, 1, 1, 400)


def test_ablate_bands_rows_and_determinism(small_task):
    kwargs = dict(seeds=(0,), presets=None)
    rows = ablate_bands(small_task, BB, FT, **kwargs)
    assert [r["preset"] for r in rows] == ["1-band", "2-band", "4-band", "12-band"]
    assert [r["n_tokens"] for r in rows] == [f * 1 * 4 for f in (1, 2, 4, 12)]
    assert rows == ablate_bands(small_task, BB, FT, **kwargs)
    with pytest.raises(ConfigurationError):
        ablate_bands(small_task, BB, FT, presets=["3-band"])


def test_ablate_patch_lengths(small_task):
    rows = ablate_patch(small_task, BB, FT, seeds=(0,))
    assert [r["n_patches"] for r in rows] == [8, 4, 2, 1]
    assert [r["patch_samples"] for r in rows] == [50, 100, 200, 400]
    with pytest.raises(PatchSizeError):
        ablate_patch(small_task, BB, FT, sizes_s=(0.3,), seeds=(0,))


def test_patch_counts_at_four_second_windows():
    cfg = BackboneConfig(window_samples=800, patch_samples=50)
    assert cfg.n_patches == 16
    assert BackboneConfig(window_samples=800, patch_samples=400).n_patches == 2


def _pretrain_windows(n=20):
    rng = np.random.default_rng(0)
    return rng.standard_normal((n, 2, 1, 40)).astype(np.float32)


PRE_BB = BackboneConfig(n_bands=2, n_channels=1, window_samples=40, patch_samples=10, encoder=ENC)


def test_ablate_objectives_rows():
    x = _pretrain_windows()
    rows = ablate_objectives(x[:16], x[16:], PRE_BB, PretrainConfig(batch_size=8, epochs=1))
    assert len(rows) == 7
    assert rows[0]["reference"] is True and rows[0]["omitted"] == ""
    assert sorted(r["omitted"] for r in rows[1:]) == sorted(OBJECTIVES)
    for r in rows[1:]:
        assert r[f"heldout_{r['omitted']}"] == ""
        assert r["omitted"] not in r["objectives"].split("+")
        assert all(isinstance(r[f"heldout_{t}"], float) for t in OBJECTIVES if t != r["omitted"])


def test_scale_study_shares_heldout_set():
    x = _pretrain_windows(30)
    study = scale_study(x, [0.25, 0.5, 1.0], PRE_BB, PretrainConfig(batch_size=8, epochs=1))
    assert [r["fraction"] for r in study.table] == [0.25, 0.5, 1.0]
    assert {r["n_heldout"] for r in study.table} == {6}
    held = set(study.heldout_index.tolist())
    subsets = [set(v.tolist()) for v in study.train_subsets.values()]
    assert all(not s & held for s in subsets)
    assert subsets[0] <= subsets[1] <= subsets[2]
    assert {r["fraction"] for r in study.curves} == {0.25, 0.5, 1.0}
    with pytest.raises(InvalidParameterError):
        scale_study(x, [0.0, 1.0], PRE_BB)


def test_labeled_windows_split():
    lw = LabeledWindows(np.arange(10)[:, None], np.arange(10))
    train, test = lw.split(0.2, seed=0)
    assert len(train) == 8 and len(test) == 2
    assert not set(train.y) & set(test.y)


def test_table_round_trip(tmp_path):
    rows = [{"a": 0.1, "b": "x"}, {"a": 1 / 3, "c": 2}]
    path = write_table(tmp_path / "t.csv", rows)
    back = read_table(path)
    assert list(back[0]) == ["a", "b", "c"]
    assert float(back[1]["a"]) == 1 / 3
