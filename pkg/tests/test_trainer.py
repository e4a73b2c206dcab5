import numpy as np
import pytest

from tut import data as D
from tut import net as N
from tut import trainer as TR
from tut.config import PRESETS, build_configs
from tut.errors import ConfigError, TrainingDiverged
from tut.tensor import AdamState


def tiny_model(**kw):
    base = dict(
        input_dim=8,
        num_classes=3,
        layers=2,
        refinement_stages=1,
        window=5,
        heads=2,
        hidden_dim=16,
        hidden_dim_refine=16,
        ffn_dim=16,
        ffn_dim_refine=16,
        input_dropout=0.1,
        ffn_dropout=0.1,
        attention_dropout=0.0,
    )
    base.update(kw)
    return N.ModelConfig(**base)


def tiny_dataset(videos=3, seed=0, noise=0.15):
    spec = D.SynthSpec(
        num_classes=3, num_videos=videos, min_len=32, max_len=48,
        feature_dim=8, noise=noise, seed=seed,
    )
    return D.generate_synthetic(spec)


def test_lr_rule_scripted_trace():
    state = TR.TrainState(lr=1.0)
    # increases at epochs 3, 5, 7 -> halve after epoch 7, counter resets
    trace = [5.0, 4.0, 4.5, 3.0, 3.5, 2.0, 2.5, 1.0]
    lrs = []
    for loss in trace:
        TR.apply_lr_rule(state, loss, factor=0.5, patience=3)
        lrs.append(state.lr)
        assert 0 <= state.increase_count < 3
    assert lrs == [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5]
    # lr never increases
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_loss_trends_down():
    samples, mapping = tiny_dataset(noise=0.0)
    cfg = tiny_model()
    result = TR.train(samples, cfg, TR.TrainConfig(epochs=20, lr=1e-3, seed=4))
    assert result.log_rows[19]["total"] < result.log_rows[0]["total"]
    assert len(result.log_rows) == 20
    assert result.state.epoch == 20


def test_train_deterministic_bytes(tmp_path):
    samples, _ = tiny_dataset()
    cfg = tiny_model()

    def run(path):
        result = TR.train(samples, cfg, TR.TrainConfig(epochs=2, lr=1e-3, seed=9))
        N.save_checkpoint(path, result.params, cfg)
        return TR.log_csv(result.log_rows)

    log_a = run(tmp_path / "a.ckpt")
    log_b = run(tmp_path / "b.ckpt")
    assert log_a == log_b
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_roundtrip_same_report(tmp_path):
    samples, _ = tiny_dataset()
    cfg = tiny_model()
    result = TR.train(samples, cfg, TR.TrainConfig(epochs=3, lr=1e-3, seed=2))
    direct, _ = TR.evaluate_model(result.params, cfg, samples)
    path = tmp_path / "m.ckpt"
    N.save_checkpoint(path, result.params, cfg)
    loaded, _ = TR.evaluate_run(path, samples)
    assert direct.acc == loaded.acc
    assert direct.edit == loaded.edit
    assert direct.f1 == loaded.f1
    assert set(loaded.f1) == {0.1, 0.25, 0.5}


def test_predict_recovers_labels_after_overfit():
    samples, _ = tiny_dataset(videos=1, noise=0.0)
    cfg = tiny_model(refinement_stages=0, input_dropout=0.0, ffn_dropout=0.0)
    result = TR.train(
        samples, cfg, TR.TrainConfig(epochs=80, lr=3e-3, smooth_weight=0.0, seed=3)
    )
    from tut.losses import ce_loss
    from tut.net import model_forward

    out = model_forward(samples[0].features, result.params, cfg)
    assert float(ce_loss(out.logits[-1], samples[0].labels).data) < 0.05
    pred = TR.predict_sample(result.params, cfg, samples[0])
    np.testing.assert_array_equal(pred, samples[0].labels)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_training_divergence_names_video():
    samples, _ = tiny_dataset(videos=2)
    cfg = tiny_model()
    with pytest.raises(TrainingDiverged, match="synth00"):
        TR.train(samples, cfg, TR.TrainConfig(epochs=12, lr=1e6, seed=1))


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        TR.train([], tiny_model(), TR.TrainConfig(seed=0))


def test_predict_upsamples_to_source_rate():
    samples, _ = tiny_dataset(videos=1)
    half = D.resample_temporal(samples[0], 30.0, 15.0)
    cfg = tiny_model()
    result = TR.train([half], cfg, TR.TrainConfig(epochs=1, lr=1e-3, seed=5))
    up = TR.predict_sample(result.params, cfg, half, upsample=True)
    assert up.shape[0] == samples[0].num_frames


def test_boundary_alignment_probe():
    samples, _ = tiny_dataset()
    cfg = tiny_model()
    result = TR.train(samples, cfg, TR.TrainConfig(epochs=1, lr=1e-3, seed=6))
    value = TR.boundary_alignment(result.params, cfg, samples)
    assert value is not None and value > 0


def test_segments_csv_format():
    csv_text = TR.segments_csv([0, 0, 1], D.ClassMapping(["a", "b"]))
    assert csv_text.splitlines() == ["class,start,end", "a,0,1", "b,2,2"]


def test_ablate_arch_attention_grid():
    samples, mapping = tiny_dataset(videos=2)
    cfg = tiny_model(pe_mode="none")
    train_cfg = TR.TrainConfig(epochs=1, lr=1e-3, seed=7)
    rows = TR.ablate("arch-attention", samples, cfg, train_cfg)
    assert len(rows) == 6
    assert {(r["architecture"], r["attention"]) for r in rows} == {
        (a, p) for a in ("utrans", "standard") for p in ("full", "local", "logsparse")
    }
    assert all(r["status"] == "ok" for r in rows)
    cell = {(r["architecture"], r["attention"]): r["entries"] for r in rows}
    assert cell[("utrans", "local")] < cell[("standard", "local")] < cell[("standard", "full")]
    csv_text = TR.ablate_csv(rows)
    assert csv_text.splitlines()[0].startswith("architecture,attention,")
    assert len(csv_text.strip().splitlines()) == 7


def test_ablate_pe_and_badistance_grids():
    samples, _ = tiny_dataset(videos=2)
    train_cfg = TR.TrainConfig(epochs=1, lr=1e-3, seed=8)
    pe_rows = TR.ablate("positional-encoding", samples, tiny_model(), train_cfg)
    assert len(pe_rows) == 6
    assert [r["pe_mode"] for r in pe_rows] == [
        "none", "sinusoidal", "learnable", "relative", "relative", "relative"
    ]
    assert [r["rpe_share"] for r in pe_rows[3:]] == ["none", "stage", "scale"]

    ba_rows = TR.ablate("ba-distance", samples, tiny_model(), train_cfg)
    assert len(ba_rows) == 4
    assert all(r["beta"] == 0.02 for r in ba_rows)
    assert all(r["status"] == "ok" for r in ba_rows)


def test_ablate_skips_unsupported_cell():
    samples, _ = tiny_dataset(videos=1)
    cfg = tiny_model(attention="logsparse", pe_mode="none")
    train_cfg = TR.TrainConfig(epochs=1, lr=1e-3, seed=9, boundary_weight=0.02)
    rows = TR.ablate("beta", samples, cfg, train_cfg, values=[0.0, 0.02])
    assert rows[0]["status"] == "ok"  # beta 0 trains fine
    assert rows[1]["status"].startswith("skipped")


def test_presets_match_documented_values():
    assert PRESETS["50salads"]["train"]["boundary_weight"] == 0.02
    assert PRESETS["gtea"]["train"]["boundary_weight"] == 0.1
    assert PRESETS["breakfast"]["train"]["boundary_weight"] == 0.005
    model, train, data = build_configs(preset="50salads")
    assert (model.window, model.layers, model.refinement_stages, model.heads) == (51, 5, 3, 4)
    assert (model.hidden_dim, model.hidden_dim_refine) == (128, 64)
    assert (train.lr, train.weight_decay) == (5e-4, 1e-5)
    assert train.smooth_weight == 0.15 and train.smooth_clip == 4.0
    assert data.sample_rate == 2
    model, train, _ = build_configs(preset="gtea")
    assert (model.layers, model.window, model.hidden_dim, model.heads) == (4, 11, 64, 4)
    assert model.input_dropout == 0.5
    model, train, _ = build_configs(preset="breakfast")
    assert (model.window, model.hidden_dim, model.heads) == (25, 192, 6)
    assert train.lr == 2e-4 and train.weight_decay == 5e-5


def test_config_file_and_override_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "[model]\nwindow = 7\nheads = 1\n\n[train]\nlr = 0.01\n\n[data]\nsample_rate = 2\n"
    )
    model, train, data = build_configs(
        preset="gtea", config_file=cfg_file, overrides={"heads": "2", "epochs": "5"}
    )
    assert model.window == 7  # file beats preset (11)
    assert model.heads == 2  # flag beats file (1)
    assert train.lr == 0.01 and train.epochs == 5
    assert data.sample_rate == 2
    with pytest.raises(ConfigError):
        build_configs(overrides={"not_a_key": 1})
    with pytest.raises(ConfigError):
        build_configs(preset="unknown")
    bad = tmp_path / "bad.cfg"
    bad.write_text("[nope]\nx = 1\n")
    with pytest.raises(ConfigError):
        build_configs(config_file=bad)


def test_adam_state_lives_across_epochs():
    samples, _ = tiny_dataset(videos=1)
    cfg = tiny_model()
    result = TR.train(samples, cfg, TR.TrainConfig(epochs=3, lr=1e-3, seed=10))
    assert isinstance(result.state.adam, AdamState)
    assert result.state.adam.step == 3  # one step per video per epoch


def test_keep_best_tracks_best_epoch():
    samples, _ = tiny_dataset(videos=2, noise=0.0)
    cfg = tiny_model()
    result = TR.train(
        samples, cfg,
        TR.TrainConfig(epochs=6, lr=1e-3, seed=12, keep_best=True, eval_every=2),
    )
    assert result.best_epoch in (2, 4, 6)
    assert result.best_params is not None and result.best_acc is not None
    # the rolling-best snapshot is detached from the live parameters
    live = result.params["stage0.proj.w"].data
    best = result.best_params["stage0.proj.w"].data
    assert best.base is None or best.base is not live


def test_keep_best_off_by_default():
    samples, _ = tiny_dataset(videos=1)
    result = TR.train(samples, tiny_model(), TR.TrainConfig(epochs=1, lr=1e-3, seed=13))
    assert result.best_params is None
