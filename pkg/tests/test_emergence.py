"""
End-to-end training on the synthetic shapes at the default optimizer settings.
These take minutes on a CPU and are skipped unless selected with ``-m slow``.
"""
import numpy as np
import pytest

from crateseg.analysis import maskcut_analysis, rate_reports, segmentation_miou
from crateseg.config import ModelConfig
from crateseg.data import SynthDataConfig, generate_dataset, split_of
from crateseg.model import build_model
from crateseg.training import OptimizerConfig, TrainState, evaluate_accuracy, train

COUNT = 2500
# mean foreground fraction of the shapes
TOP_FRACTION = 0.3
LAYER = 3


def _config(arch):
    return ModelConfig.for_architecture(
        arch, num_layers=4, model_dim=64, num_heads=4, head_dim=16,
        image_shape=(3, 32, 32), patch_shape=(8, 8), num_classes=3,
    )


@pytest.fixture(scope="module")
def splits():
    samples = generate_dataset(SynthDataConfig(num_classes=3, image_size=32, patch_size=8), COUNT)
    train_samples = [s for i, s in enumerate(samples) if split_of(i, COUNT, 0.2) == "train"]
    test_samples = [s for i, s in enumerate(samples) if split_of(i, COUNT, 0.2) == "test"]
    assert (len(train_samples), len(test_samples)) == (2000, 500)
    return train_samples, test_samples


@pytest.fixture(scope="module")
def trained(splits):
    train_samples, test_samples = splits
    models = {}

    def get(arch):
        if arch not in models:
            state = TrainState(build_model(_config(arch), seed=0))
            models[arch] = train(state, train_samples, OptimizerConfig(), test_samples, progress=False)
        return models[arch]
    return get


@pytest.mark.slow
def test_crate_classifies_shapes(trained, splits):
    state = trained("crate")
    assert state.history[-1].loss < state.history[0].loss
    assert evaluate_accuracy(state.model, splits[1]) >= 0.85


@pytest.mark.slow
def test_attention_segments_after_training(trained, splits):
    test_samples = splits[1]
    report = segmentation_miou(trained("crate").model, test_samples, LAYER, TOP_FRACTION)
    untrained = segmentation_miou(build_model(_config("crate"), seed=0), test_samples, LAYER, TOP_FRACTION)
    assert report["miou"] >= untrained["miou"] + 0.10
    assert report["miou"] >= report["random_baseline"] + 0.10


@pytest.mark.slow
def test_vit_attention_segments_worse(trained, splits):
    test_samples = splits[1]
    crate = segmentation_miou(trained("crate").model, test_samples, LAYER, TOP_FRACTION)
    vit = segmentation_miou(trained("vit").model, test_samples, LAYER, TOP_FRACTION)
    assert vit["miou"] < crate["miou"]


@pytest.mark.slow
def test_maskcut_improves_past_first_layer(trained, splits):
    model = trained("crate").model
    samples = splits[1][:100]
    ap = [maskcut_analysis(model, samples, layer)["ap"] for layer in range(1, 5)]
    assert int(np.argmax(ap)) != 0, ap


@pytest.mark.slow
def test_layers_compress(trained, splits):
    reports = rate_reports(trained("crate").model, splits[1][:20], layers=[1, 4])
    assert all(r.R >= 0 and r.Rc >= 0 for r in reports)
