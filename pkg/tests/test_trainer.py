import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepair.errors import DivergenceError, TrainingError, UndefinedMetricError
from deepair.evaluator import mape
from deepair.gridstore import GridSpec, UrbanDynamicsMap, canonical_schema
from deepair.model import ModelConfig, build_model
from deepair.pipeline import PrepConfig, preprocess
from deepair.tensorcore import read_checkpoint
from deepair.trainer import (TrainConfig, TrainState, crop_patch, fit, forecast_pairs,
                             predict_segment, train_epoch, train_iteration, validate)
from tests.builders import T0, constant_map, tiny_model, tiny_prep

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def prep():
    return tiny_prep()


def dense_map(rows, cols, hours=3, seed=0):
    schema = canonical_schema()
    rng = np.random.default_rng(seed)
    values = rng.uniform(1, 2, size=(hours, len(schema), rows, cols)).astype(np.float32)
    values[:, schema.group_indices("auxiliary")] = 3
    return UrbanDynamicsMap(GridSpec(rows, cols), schema, T0, values, np.ones(values.shape, bool))


class TestCropPatch:
    dense = dense_map(50, 55)

    def test_interior_has_no_fill(self):
        p = crop_patch(self.dense, (7, 7), 0)
        assert p.values.shape == (16, 15, 15) and (p.values > 0).all()

    def test_corner_fill(self):
        p = crop_patch(self.dense, (0, 0), 1)
        # rows/cols -7..-1 lie beyond the map edge
        dyn = p.values[:14]
        assert not dyn[:, :7, :].any() and not dyn[:, :, :7].any()
        assert (dyn[:, 7:, 7:] > 0).all()

    @settings(max_examples=40)
    @given(st.integers(0, 49), st.integers(0, 54), st.integers(-7, 7), st.integers(-7, 7))
    def test_offset_mapping(self, r, c, dr, dc):
        p = crop_patch(self.dense, (r, c), 2)
        inside = 0 <= r + dr < 50 and 0 <= c + dc < 55
        got = p.values[:14, 7 + dr, 7 + dc]
        want = self.dense.values[2, :14, r + dr, c + dc] if inside else np.zeros(14)
        assert np.array_equal(got, want)

    def test_out_of_range(self):
        with pytest.raises(TrainingError):
            crop_patch(self.dense, (3, 3), 3)

    def test_embedded_auxiliary(self):
        m = tiny_model()
        p = crop_patch(self.dense, (3, 3), 0, params=m.params)
        assert np.ptp(p.values[14]) == 0 and p.values[14, 0, 0] == m.params["emb.dow"].data[3, 0]


def first_target(prep, segment="train"):
    for t in prep.split.targets(segment):
        for cell in prep.stations:
            if prep.target_std(cell, t) is not None:
                return cell, t
    raise AssertionError("no target")


class TestIteration:
    def test_zero_lr_keeps_params(self, prep):
        m = tiny_model()
        before = m.params.snapshot()
        cell, t = first_target(prep)
        loss = train_iteration(m, prep, TrainState.fresh(0), [cell], t, lr=0.0)
        assert loss > 0
        assert all(np.array_equal(before[k], v) for k, v in m.params.state().items()
                   if not k.endswith(("running_mean", "running_var")))

    def test_missing_target_skipped(self, prep):
        m = tiny_model()
        state = TrainState.fresh(0)
        assert train_iteration(m, prep, state, [(0, 0)], 50, 0.01) is None
        assert state.skipped == 1

    def test_bias_only_solution_has_zero_loss(self):
        prep = preprocess(constant_map(), PrepConfig(window=4))
        m = tiny_model()
        m.params["head.w"].data[...] = 0
        m.params["head.b"].data[...] = 0
        cell, t = first_target(prep)
        assert train_iteration(m, prep, TrainState.fresh(0), [cell], t, 0.01) == 0.0

    def test_golden_loss(self):
        fixture = json.loads((GOLDEN / "train_iteration.json").read_text())
        assert golden_iteration() == pytest.approx(fixture, rel=1e-6, abs=1e-9)

    def test_no_leakage(self, prep):
        lo, hi = prep.split.segment("train")
        for t in list(prep.split.targets("train"))[:20]:
            b = prep.window_batch([prep.stations[0]], [t])
            assert b.hours.max() < t and b.hours.min() >= lo and t < hi


def golden_iteration():
    prep = tiny_prep()
    m = tiny_model()
    cell, t = first_target(prep)
    state = TrainState.fresh(0)
    first = train_iteration(m, prep, state, [cell], t, 0.01)
    second = train_iteration(m, prep, state, [cell], t, 0.01)
    return {"loss": first, "loss_after_step": second,
            "head_b": m.params["head.b"].data.astype(float).tolist()}


class TestEpoch:
    def test_deterministic(self, prep):
        cfg = TrainConfig(window=4, seed=3)
        runs = []
        for _ in range(2):
            s = TrainState.fresh(3)
            loss = train_epoch(tiny_model(), prep, s, cfg)
            runs.append((loss, s.samples))
        assert runs[0] == runs[1]

    def test_mean_matches_recorded(self, prep):
        s = TrainState.fresh(1)
        loss = train_epoch(tiny_model(), prep, s, TrainConfig(window=4, seed=1))
        assert abs(loss - sum(s.losses) / len(s.losses)) < 1e-9

    def test_three_usable_hours(self):
        prep = tiny_prep()
        keep = list(prep.split.targets("train"))[5:8]
        drop = np.ones(prep.hours, bool)
        drop[keep] = False
        for pos in prep.aq_pos:
            prep.mask[drop, pos] = False
        s = TrainState.fresh(0)
        train_epoch(tiny_model(), prep, s, TrainConfig(window=4))
        assert len(s.losses) == 3 and s.skipped == len(prep.split.targets("train")) - 3

    def test_no_usable_hours(self):
        prep = tiny_prep()
        for pos in prep.aq_pos:
            prep.mask[:, pos] = False
        with pytest.raises(TrainingError):
            train_epoch(tiny_model(), prep, TrainState.fresh(0), TrainConfig(window=4))

    def test_batch_averages_loss(self, prep):
        m = tiny_model()
        cell, t = first_target(prep)
        one = train_iteration(tiny_model(), prep, TrainState.fresh(0), [cell], t, 0.0)
        two = train_iteration(m, prep, TrainState.fresh(0), [cell, cell], t, 0.0)
        assert two == pytest.approx(one, rel=1e-6)


class TestValidate:
    def test_persistence_constant(self):
        prep = preprocess(constant_map(), PrepConfig(window=4))
        assert validate(tiny_model("persistence"), prep) == 0.0

    def test_empty(self):
        prep = tiny_prep()
        lo, hi = prep.split.segment("validation")
        prep.truth_mask[lo:hi] = False
        with pytest.raises(UndefinedMetricError):
            validate(tiny_model("persistence"), prep)

    def test_matches_exported_records(self, prep):
        m = tiny_model()
        assert validate(m, prep) == mape(predict_segment(m, prep, "validation"))

    def test_cached_features_match_direct_forward(self, prep):
        m = tiny_model()
        pairs = [(prep.stations[k], t) for k, t in ((0, 130), (3, 131), (0, 135))]
        fast = forecast_pairs(m, prep, pairs)
        for (cell, t), row in zip(pairs, fast):
            direct = m.forward(prep.window_batch([cell], [t]), mode="eval").data[0]
            assert np.allclose(row, direct, atol=1e-5)


class TestFit:
    def scripted(self, vals, **kw):
        m = tiny_model()
        marks = []

        def epoch_fn(epoch):
            m.params["head.b"].data[...] = epoch
            return 1.0

        def validate_fn(epoch):
            marks.append(epoch)
            return vals[epoch - 1]

        cfg = TrainConfig(window=4, **kw)
        return m, fit(cfg, m, epoch_fn=epoch_fn, validate_fn=validate_fn), marks

    def test_early_stop_restores_best(self):
        m, res, marks = self.scripted([10, 9, 9.5, 9.6, 9.7, 9.8, 9.9, 1.0, 1.0])
        assert len(res.log) == 7 and res.best_epoch == 2 and res.stopped == "early_stop"
        assert (m.params["head.b"].data == 2).all()
        assert [r["epochs_since_best"] for r in res.log] == [0, 0, 1, 2, 3, 4, 5]

    def test_equal_is_not_improvement(self):
        _, res, _ = self.scripted([5, 5, 5, 5, 5, 5, 5])
        assert res.best_epoch == 1 and len(res.log) == 6

    def test_single_epoch(self):
        _, res, marks = self.scripted([3.0], max_epochs=1)
        assert marks == [1] and res.stopped == "max_epochs"

    def test_monotone_runs_to_max(self):
        vals = [10 - k for k in range(8)]
        m, res, _ = self.scripted(vals, max_epochs=8)
        assert res.best_epoch == 8 and res.best_validation == min(vals)
        assert (m.params["head.b"].data == 8).all()

    def test_divergence_restores_last_good(self):
        m = tiny_model()

        def epoch_fn(epoch):
            m.params["head.b"].data[...] = epoch
            return 1.0 if epoch < 3 else math.nan

        with pytest.raises(DivergenceError) as err:
            fit(TrainConfig(window=4), m, epoch_fn=epoch_fn, validate_fn=lambda e: 10.0 - e)
        assert "epoch 3" in str(err.value) and (m.params["head.b"].data == 2).all()

    def test_artifacts(self, prep, tmp_path):
        m = tiny_model()
        res = fit(TrainConfig(window=4, max_epochs=2), m, prep, out_dir=tmp_path)
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_mape,epochs_since_best"
        assert lines[-1] == f"# best=ckpt_{res.best_epoch}.bin"
        assert res.best_validation == min(r["val_mape"] for r in res.log)
        params, meta = read_checkpoint(tmp_path / "best.bin")
        assert meta["epoch"] == res.best_epoch
        assert all(np.array_equal(params[k], v) for k, v in res.state.items())
        assert (tmp_path / f"ckpt_{res.best_epoch}.bin").exists()


def test_leave_one_out_poisoning(prep):
    """Corrupting the target station's own history never reaches its forecast."""
    m = tiny_model()
    cell = prep.stations[2]
    pairs = [(cell, t) for t in list(prep.split.targets("validation"))[:4]]
    clean = forecast_pairs(m, prep, pairs)
    poisoned = tiny_prep()
    r, c = cell
    poisoned.std_values[:, :, r, c] = 1e30
    poisoned.filler._cache.clear()
    assert forecast_pairs(m, poisoned, pairs).tobytes() == clean.tobytes()
