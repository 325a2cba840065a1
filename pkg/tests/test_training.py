import csv
import io

import numpy as np
import pytest

from seeaunet.data import synth_dataset
from seeaunet.errors import ConfigError, TrainingError
from seeaunet.models import ModelConfig, build_model
from seeaunet.training import (
    REPORT_HEADER,
    TrainConfig,
    compare_models,
    evaluate,
    evaluate_predictions,
    predict,
    save_curves,
    train,
)

TINY = dict(input_size=(16, 16), base_filters=4, depth=2, se_reduction=2)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(6, (16, 16), seed=11), synth_dataset(3, (16, 16), seed=12)


def tiny(arch="seea_unet", seed=0):
    return build_model(ModelConfig(arch=arch, **TINY), seed=seed)


def test_zero_lr_leaves_trainable_parameters_untouched(data):
    model = tiny()
    before = model.params.state_dict()
    params, _ = train(model, *data, TrainConfig(epochs=1, lr=0.0, batch_size=3))
    after = params.state_dict()
    for p in params:
        if p.trainable:
            assert after[p.name].tobytes() == before[p.name].tobytes(), p.name
    moved = [p.name for p in params if not p.trainable and not np.array_equal(after[p.name], before[p.name])]
    assert moved  # running statistics still update in train mode


def test_report_rows_and_plateau_early_stop(data, monkeypatch):
    import seeaunet.training as training

    flat = training.EvalResult(0.1, 0.5, 0.5)
    monkeypatch.setattr(training, "evaluate", lambda *a, **k: flat)
    _, report = train(tiny(), *data, TrainConfig(epochs=5, batch_size=3, early_stop_patience=1))
    assert len(report.rows) == 2 and report.stopped_early
    monkeypatch.undo()
    _, full = train(tiny(), *data, TrainConfig(epochs=2, lr=0.01, batch_size=3))
    assert [r.epoch for r in full.rows] == [1, 2]


def test_best_epoch_restored(data):
    model = tiny()
    params, report = train(model, *data, TrainConfig(epochs=3, lr=0.05, batch_size=2))
    best = min(report.rows, key=lambda r: r.val_loss)
    assert report.best_epoch == best.epoch
    res = evaluate(model, data[1])
    assert res.loss == pytest.approx(best.val_loss, rel=1e-6)
    assert res.soft_jaccard == pytest.approx(best.val_jaccard, rel=1e-6)


def test_evaluate_is_pure(data):
    model = tiny()
    before = model.params.state_dict()
    one = evaluate(model, data[0])
    two = evaluate(model, data[0])
    assert one == two
    after = model.params.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_metric_path_oracles(data):
    masks = np.stack([s.mask for s in data[0]])
    assert masks.sum() > 0
    assert evaluate_predictions(masks, masks).hard_jaccard == pytest.approx(1.0)
    assert evaluate_predictions(np.zeros_like(masks), masks).hard_jaccard < 1e-6


def test_nan_loss_names_epoch_and_batch(data):
    model = tiny()
    model.params["head.conv.weight"].data[...] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 1, batch 0"):
        train(model, *data, TrainConfig(epochs=1, batch_size=3))


def test_identical_seed_identical_report(data):
    cfg = TrainConfig(epochs=2, lr=0.01, batch_size=4, seed=3)
    _, a = train(tiny(seed=3), *data, cfg)
    _, b = train(tiny(seed=3), *data, cfg)
    assert a.metrics_equal(b)
    _, c = train(tiny(seed=4), *data, TrainConfig(epochs=2, lr=0.01, batch_size=4, seed=4))
    assert not a.metrics_equal(c)


def test_stop_when_hook(data):
    _, report = train(tiny(), *data, TrainConfig(epochs=4, batch_size=3), stop_when=lambda row: row.epoch == 2)
    assert len(report.rows) == 2


def test_predict_shapes_and_binarisation(data):
    model = tiny()
    soft, binary = predict(model, data[0][0].image)
    assert soft.shape == binary.shape == (1, 16, 16)
    assert np.all((soft > 0) & (soft < 1))
    assert np.array_equal((binary >= 0.5).astype(binary.dtype), binary)
    batch_soft, _ = predict(model, np.stack([s.image for s in data[0][:2]]))
    assert batch_soft.shape == (2, 1, 16, 16)


def test_report_csv_format(data):
    _, report = train(tiny(), *data, TrainConfig(epochs=2, batch_size=3))
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert rows[0] == REPORT_HEADER
    assert len(rows) == 3
    for row in rows[1:]:
        assert all(len(cell.split(".")[1]) == 6 for cell in row[1:])


def test_curves_written(data, tmp_path):
    _, report = train(tiny(), *data, TrainConfig(epochs=2, batch_size=3))
    for path in save_curves(report, tmp_path):
        assert path.read_bytes()[:4] == b"\x89PNG"


def test_compare_table_shape(data):
    cfg = ModelConfig(arch="unet", **TINY)
    table = compare_models(["unet", "seea"], *data, cfg, TrainConfig(batch_size=3, epochs=1), epochs=(1, 2))
    assert [r.model for r in table.rows] == ["unet", "seea_unet"]
    header = table.to_csv().splitlines()[0].split(",")
    assert header == ["model", "train_jaccard@1", "val_jaccard@1", "train_jaccard@2", "val_jaccard@2",
                      "train_loss@1", "val_loss@1", "train_loss@2", "val_loss@2"]
    assert all(r.model in table.reports for r in table.rows)
    assert "train" in table.config and table.config["train"]["epochs"] == 2


def test_compare_marks_missing_epochs(data):
    cfg = ModelConfig(arch="unet", **TINY)
    table = compare_models(["unet"], *data, cfg, TrainConfig(batch_size=3, max_steps=2), epochs=(1, 3))
    line = table.to_csv().splitlines()[1].split(",")
    assert "-" in line


def test_train_config_validation():
    with pytest.raises(ConfigError) as err:
        TrainConfig(epochs=0, lr=-1, batch_size=0)
    assert len(err.value.problems) == 3
    cfg = TrainConfig(epochs=4, early_stop_patience=2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
