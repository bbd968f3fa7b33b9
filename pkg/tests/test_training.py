import numpy as np
import pytest

from tempxcnn.models import KINDS, ModelSpec, build_model
from tempxcnn.prep import DatasetSplit, Sample
from tempxcnn.tensor import SeededRng
from tempxcnn.training import (ExperimentConfig, MetricsRecord, TrackedSamples, assemble_batch,
                               compare_models, comparison_csv, evaluate, format_comparison,
                               make_batches, recalibration_batches, run_experiment, train)

HW = (32, 32)


def make_samples(n, seed=0, signal=1.0, hw=HW, shuffle_labels=False):
    """Label 1 images carry a bright square; differences mirror the image."""
    g = np.random.default_rng(seed)
    out = []
    labels = np.arange(n) % 2
    if shuffle_labels:
        labels = g.permutation(labels)
    for i in range(n):
        img = g.normal(0.5, 0.1, size=hw).astype(np.float32)
        if (i % 2) == 1:
            img[8:16, 8:16] += signal
        lab = int(labels[i])
        diff = {"absolute": img * 0.5, "relative": img * 0.25}
        out.append(Sample(img, lab, f"m{i % 4}", ("wild", "pth")[lab], i % 8, i, diff))
    return out


def make_split(n_train=64, n_val=16, n_test=16, seed=0, **kw):
    return DatasetSplit(make_samples(n_train, seed, **kw), make_samples(n_val, seed + 1, **kw),
                        make_samples(n_test, seed + 2, **kw), {"wild": "m0", "pth": "m1"}, 1.0)


class FixedModel:
    """Stand-in returning scripted predictions."""

    def __init__(self, kind, preds):
        self.spec = ModelSpec(kind, input_hw=HW)
        self.preds = np.asarray(preds)
        self.pos = 0

    def predict(self, batch):
        n = batch["image"].shape[0]
        out = self.preds[self.pos:self.pos + n]
        self.pos += n
        return out


# -- batching -------------------------------------------------------------------------

def test_batch_sizes_for_100_samples():
    sizes = [len(y) for _, y in make_batches(make_samples(100), "cnn", 32, SeededRng(0))]
    assert sizes == [32, 32, 32, 4]


def test_same_seed_same_order():
    s = make_samples(40)
    a = [y.tolist() for _, y in make_batches(s, "cnn", 8, SeededRng(3))]
    b = [y.tolist() for _, y in make_batches(s, "cnn", 8, SeededRng(3))]
    first = [b["image"][0, 0, 0, 0] for b, _ in make_batches(s, "cnn", 8, SeededRng(3))]
    again = [b["image"][0, 0, 0, 0] for b, _ in make_batches(s, "cnn", 8, SeededRng(3))]
    assert a == b and first == again


def test_batch_is_a_permutation():
    s = make_samples(20)
    seen = np.concatenate([b["image"][:, 0, 0, 0] for b, _ in make_batches(s, "cnn", 6, SeededRng(1))])
    assert sorted(seen.tolist()) == sorted(x.image[0, 0] for x in s)


@pytest.mark.parametrize("kind,keys", [
    ("cnn", {"image"}), ("cnn_ts", {"image", "timestamp"}),
    ("xcnn_absdiff", {"image", "difference"}), ("xcnn_ts_reldiff", {"image", "difference", "timestamp"}),
])
def test_channels_per_kind(kind, keys):
    batch, labels = assemble_batch(make_samples(4), kind)
    assert set(batch) == keys
    assert batch["image"].shape == (4, 1) + HW and labels.shape == (4,)
    if "timestamp" in batch:
        assert batch["timestamp"].shape == (4,)


def test_difference_mode_selected():
    s = make_samples(2)
    b_abs, _ = assemble_batch(s, "xcnn_absdiff")
    b_rel, _ = assemble_batch(s, "xcnn_reldiff")
    np.testing.assert_array_equal(b_abs["difference"][0, 0], s[0].differences["absolute"])
    np.testing.assert_array_equal(b_rel["difference"][0, 0], s[0].differences["relative"])


def test_missing_difference_mode_raises():
    s = make_samples(2)
    for x in s:
        x.differences.pop("relative")
    with pytest.raises(ValueError, match="relative"):
        assemble_batch(s, "xcnn_reldiff")


def test_empty_split_raises():
    with pytest.raises(ValueError, match="empty"):
        list(make_batches([], "cnn", 4, None))


def test_scale_divides_pixels():
    s = make_samples(2)
    batch, _ = assemble_batch(s, "cnn", scale=4.0)
    np.testing.assert_allclose(batch["image"][0, 0], s[0].image / 4, rtol=1e-6)


# -- evaluation ---------------------------------------------------------------------------

def test_evaluate_all_correct_and_complement():
    s = make_samples(10)
    labels = [x.label for x in s]
    assert evaluate(FixedModel("cnn", labels), s) == 1.0
    assert evaluate(FixedModel("cnn", [1 - v for v in labels]), s) == 0.0


def test_evaluate_hand_count():
    s = make_samples(10)
    labels = np.array([x.label for x in s])
    preds = labels.copy()
    preds[[1, 4, 7]] ^= 1
    assert evaluate(FixedModel("cnn", preds), s) == pytest.approx(0.7)


def test_evaluate_empty_raises():
    with pytest.raises(ValueError):
        evaluate(FixedModel("cnn", []), [])


def test_untrained_model_near_chance():
    model = build_model(ModelSpec("cnn", input_hw=HW), SeededRng(0))
    acc = evaluate(model, make_samples(200, seed=5))
    assert 0.3 <= acc <= 0.7


# -- training -------------------------------------------------------------------------------

def test_training_learns_separable_data():
    split = make_split(n_train=64)
    _, rec = run_experiment(split, ExperimentConfig(kind="cnn", epochs=8, batch_size=16, seed=0))
    assert rec.train_loss[-1] < rec.train_loss[0]
    assert rec.test_accuracy >= 0.9


def test_shuffled_labels_stay_near_chance():
    split = DatasetSplit(make_samples(64, 0, shuffle_labels=True), [],
                         make_samples(200, 9, signal=0.0), {}, 1.0)
    _, rec = run_experiment(split, ExperimentConfig(kind="cnn", epochs=3, batch_size=16))
    assert 0.3 <= rec.test_accuracy <= 0.7


def test_test_split_sealed_until_end():
    split = make_split()
    split.test = TrackedSamples(split.test)
    _, rec = run_experiment(split, ExperimentConfig(kind="cnn", epochs=2, batch_size=16))
    assert rec.test_reads_before_final == 0
    assert split.test.reads > 0


def test_recount_matches_reported():
    _, rec = run_experiment(make_split(), ExperimentConfig(kind="cnn_ts", epochs=2, batch_size=16))
    assert rec.recount_accuracy() == rec.test_accuracy
    assert len(rec.test_predictions) == 16


def test_training_is_deterministic():
    cfg = ExperimentConfig(kind="xcnn_ts_absdiff", epochs=2, batch_size=16, seed=4)
    _, a = run_experiment(make_split(), cfg)
    _, b = run_experiment(make_split(), cfg)
    assert a.train_loss == b.train_loss
    assert a.validation_accuracy == b.validation_accuracy
    assert a.test_predictions == b.test_predictions


def test_metrics_shape_and_csv():
    _, rec = run_experiment(make_split(), ExperimentConfig(kind="cnn", epochs=3, batch_size=16,
                                                           snapshot_epochs=(1, 3)))
    assert len(rec.train_loss) == len(rec.validation_accuracy) == len(rec.epoch_seconds) == 3
    assert set(rec.snapshot_test_accuracy) == {1, 3}
    assert rec.snapshot_test_accuracy[3] == rec.test_accuracy
    text = rec.to_csv()
    assert text.startswith("epoch,train_loss,validation_accuracy,seconds\n")
    assert "test_accuracy@1," in text


def test_trailing_single_sample_skipped():
    split = make_split(n_train=33)
    _, rec = run_experiment(split, ExperimentConfig(kind="cnn", epochs=1, batch_size=16))
    assert np.isfinite(rec.train_loss[0])


def test_kind_mismatch_and_missing_timestamps():
    split = make_split()
    model = build_model(ModelSpec("cnn_ts", input_hw=HW), SeededRng(0))
    with pytest.raises(ValueError, match="does not match"):
        train(model, split, ExperimentConfig(kind="cnn"))
    split.timestamps = False
    with pytest.raises(ValueError, match="timestamps"):
        train(model, split, ExperimentConfig(kind="cnn_ts"))


def test_empty_training_split():
    split = make_split()
    split.train = []
    model = build_model(ModelSpec("cnn", input_hw=HW), SeededRng(0))
    with pytest.raises(ValueError, match="empty"):
        train(model, split, ExperimentConfig())


def test_compare_models_table():
    split = make_split(n_train=32, n_val=8, n_test=8)
    rows = compare_models(split, ExperimentConfig(batch_size=16), epochs=(1, 2))
    assert [r.kind for r in rows] == list(KINDS)
    for r in rows:
        assert set(r.accuracy) == {1, 2} and 0.0 <= r.accuracy[2] <= 1.0
    table = format_comparison(rows)
    assert len(table.splitlines()) == 2 + 6 and "X-CNN, timestamps & abs. diff." in table
    csv_lines = comparison_csv(rows).splitlines()
    assert csv_lines[0] == "kind,acc@1,acc@2,time@1,time@2,trainable_params,total_params"
    assert len(csv_lines) == 7
    by_kind = {r.kind: r.trainable_params for r in rows}
    assert by_kind["cnn_ts"] - by_kind["cnn"] == 64


# -- config ---------------------------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("# sweep\nkind = xcnn-ts-absdiff\nepochs=7\nlearning-rate=0.05\n\nsnapshot_epochs=2,7\n")
    cfg = ExperimentConfig.from_file(p, epochs=3, seed=None)
    assert cfg.kind == "xcnn_ts_absdiff" and cfg.epochs == 3 and cfg.seed == 0
    assert cfg.learning_rate == 0.05 and cfg.snapshot_epochs == (2, 7)


def test_config_rejects_unknown_and_malformed(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("colour=blue\n")
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_file(p)
    p.write_text("epochs 5\n")
    with pytest.raises(ValueError, match="key=value"):
        ExperimentConfig.from_file(p)


@pytest.mark.parametrize("kw", [dict(batch_size=1), dict(epochs=0), dict(kind="resnet")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_empty_record_csv():
    assert "test_accuracy," in MetricsRecord("cnn").to_csv()


def test_recalibration_subset():
    s = make_samples(100)
    sizes = [b["image"].shape[0] for b in recalibration_batches(s, "cnn", 65, batch_size=32)]
    assert sizes == [32, 32]  # the lone 65th sample is dropped
    assert sum(b["image"].shape[0] for b in recalibration_batches(s, "cnn", 1000)) == 100
    assert list(recalibration_batches(s, "cnn", 0)) == []


def test_recalibration_changes_only_inference():
    split = make_split()
    cfg = dict(kind="cnn", epochs=2, batch_size=16, seed=1)
    _, on = run_experiment(split, ExperimentConfig(**cfg))
    _, off = run_experiment(split, ExperimentConfig(bn_recalibration_samples=0, **cfg))
    assert on.train_loss == off.train_loss
