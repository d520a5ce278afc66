import numpy as np
import pytest

from walkguide.annotation import TapSample
from walkguide.domain import Frame, TriggerState
from walkguide.synthetic import brightness_dataset
from walkguide.tap.config import TapConfig
from walkguide.tap.model import init_model
from walkguide.tap.policy import Decision, TriggerPolicy, decide_trigger
from walkguide.tap.store import ModelFileError, dumps_model, loads_model, model_digest, model_load, model_save
from walkguide.tap.model import TapShapeError
from walkguide.tap.train import FrameTensorCache, accuracy, predict, tap_train

L, M, H = TriggerState.LOW, TriggerState.MID, TriggerState.HIGH
SMALL = TapConfig(input_hw=16, conv_channels=(4, 8), fv_dim=8, fs_hidden=8, fs_dim=8, fusion_hidden=8)


def test_memorizes_single_sample():
    samples, frames = brightness_dataset(1, seed=1)
    result = tap_train(samples, frames, SMALL, epochs=60)
    assert result.loss_history[-1] < 0.01
    assert result.loss_history[-1] < result.loss_history[0]


def test_training_is_deterministic():
    samples, frames = brightness_dataset(12, seed=2, size=16)
    a = tap_train(samples, frames, SMALL, epochs=3)
    b = tap_train(samples, frames, SMALL, epochs=3)
    assert a.loss_history == b.loss_history
    assert dumps_model(a.model) == dumps_model(b.model)
    c = tap_train(samples, frames, TapConfig(**{**SMALL.to_dict(), "seed": 9}), epochs=3)
    assert dumps_model(c.model) != dumps_model(a.model)


def test_small_brightness_set_is_learnable():
    samples, frames = brightness_dataset(60, seed=3, size=16)
    result = tap_train(samples, frames, SMALL, epochs=30, stop_at_accuracy=1.0)
    preds = predict(result.model, samples, frames)
    assert accuracy(preds, [s.gt_state for s in samples]) >= 0.95


def test_train_errors():
    samples, frames = brightness_dataset(3, seed=0, size=16)
    with pytest.raises(ValueError):
        tap_train([], frames, SMALL, epochs=1)
    with pytest.raises(ValueError):
        tap_train(samples, frames, SMALL, epochs=0)
    with pytest.raises(ValueError, match="n_history"):
        tap_train(samples, frames, TapConfig(**{**SMALL.to_dict(), "n_history": 2}), epochs=1)
    missing = [TapSample((100, 101, 102), (L, L, L), L)]
    with pytest.raises(KeyError):
        tap_train(missing, frames, SMALL, epochs=1)


def test_on_epoch_callback_and_early_stop():
    samples, frames = brightness_dataset(3, seed=0, size=16)
    seen = []
    result = tap_train(samples, frames, SMALL, epochs=50, stop_at_accuracy=0.0, on_epoch=lambda *a: seen.append(a))
    assert result.epochs_run == 1 and len(seen) == 1


def test_frame_cache_reuses_tensors():
    samples, frames = brightness_dataset(2, seed=0, size=16)
    cache = FrameTensorCache(frames, SMALL)
    w = cache.window(samples[0])
    assert w.shape == (3, 3, 16, 16)
    assert cache.frame(samples[0].frame_indices[0]) is cache.frame(samples[0].frame_indices[0])


# ---- policy ----

def test_policy_examples():
    pol = TriggerPolicy()
    assert decide_trigger([0.1, 0.2, 0.7], 10_000, pol) == Decision("fire", H)
    assert decide_trigger([0.1, 0.2, 0.7], 11_000, pol) == Decision("suppressed", H)
    assert decide_trigger([0.5, 0.3, 0.2], 12_000, pol) == Decision("silent", L)
    assert decide_trigger([0.1, 0.2, 0.7], 15_000, pol).fired


def test_policy_threshold_and_mid_cooldown():
    pol = TriggerPolicy(threshold_high=0.6)
    assert decide_trigger([0.2, 0.25, 0.55], 0, pol) == Decision("suppressed", H)
    assert decide_trigger([0.2, 0.6, 0.2], 0, pol) == Decision("fire", M)
    assert decide_trigger([0.2, 0.6, 0.2], 14_999, pol) == Decision("suppressed", M)
    assert decide_trigger([0.2, 0.6, 0.2], 15_000, pol) == Decision("fire", M)


def test_policy_ties_go_low():
    pol = TriggerPolicy()
    assert decide_trigger([0.4, 0.4, 0.2], 0, pol).level is L
    assert decide_trigger([0.2, 0.4, 0.4], 0, pol).level is M


@pytest.mark.parametrize("cooldown, duration, step", [(5000, 20_000, 500), (3000, 10_000, 250), (5000, 4999, 100)])
def test_policy_fire_bound(cooldown, duration, step):
    pol = TriggerPolicy(cooldown_high_ms=cooldown)
    fires = sum(decide_trigger([0, 0, 1.0], t, pol).fired for t in range(0, duration + 1, step))
    assert fires <= duration // cooldown + 1


def test_policy_validation():
    for bad in (dict(threshold_high=1.0), dict(cooldown_high_ms=0), dict(cooldown_mid_ms=-1)):
        with pytest.raises(ValueError):
            TriggerPolicy(**bad)


# ---- model files ----

def test_save_load_round_trip(tmp_path):
    model = init_model(TapConfig(), seed=7)
    path = tmp_path / "m.tap"
    model_save(model, path)
    again = model_load(path)
    assert again.config == model.config
    for k in model.params:
        assert np.array_equal(model.params[k], again.params[k])
    assert model_digest(again) == model_digest(model)


def test_load_rejects_bad_files(tmp_path):
    text = dumps_model(init_model(SMALL))
    header, *rest = text.splitlines()
    wrong = header.replace('"fv_dim": 8', '"fv_dim": 9')
    with pytest.raises(TapShapeError):
        loads_model("\n".join([wrong] + rest))
    with pytest.raises(ModelFileError, match="truncated"):
        loads_model("\n".join([header] + rest[:-2]))
    with pytest.raises(ModelFileError, match="version"):
        loads_model("\n".join([header.replace('"format_version": 1', '"format_version": 2')] + rest))
    with pytest.raises(ModelFileError):
        loads_model("")
    with pytest.raises(ModelFileError):
        loads_model(text[: len(text) // 2])
