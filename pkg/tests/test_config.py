import pytest
from pydantic import ValidationError

from xlalign.config import PRESETS, ExperimentConfig, build_config, load_config, resolve_axis, with_value


def test_documented_defaults():
    c = ExperimentConfig()
    assert (c.training.epsilon, c.training.alpha, c.training.lr) == (0.1, 10.0, 0.05)
    assert (c.scheduler.rho, c.scheduler.beta, c.scheduler.tau) == (0.1, 0.5, 0.2)
    assert c.corpus.languages == ["en", "ja", "es", "ko", "ru"]
    assert c.training.candidate_layers() == [1, 2, 3, 4]


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        build_config({"training": {"learning_rate": 0.1}})


def test_out_of_range_rejected():
    with pytest.raises(ValidationError):
        build_config({"training": {"epsilon": 0}})
    with pytest.raises(ValidationError):
        build_config({"corpus": {"latent_dim": 32}})


def test_presets_apply():
    assert build_config(preset="wo_align").training.alpha == 0.0
    assert not build_config(preset="wo_bias").training.bias_compensation
    assert build_config(preset="anchor_frozen").training.pairing == "anchor_frozen"
    assert build_config(preset="layer_ii").training.candidate_layers() == [2, 4, 6, 8]
    assert build_config(preset="layer_iv").training.candidate_layers() == list(range(1, 9))
    with pytest.raises(ValueError, match="unknown preset"):
        build_config(preset="nope")
    assert set(PRESETS) >= {"wo_bias", "wo_align", "anchor_frozen", "anchor_trained", "random_pairwise"}


def test_yaml_round_trip(tmp_path):
    c = build_config({"seed": 3, "training": {"steps": 7}}, preset="anchor_trained")
    path = tmp_path / "c.yaml"
    path.write_text(c.to_yaml())
    assert load_config(path) == c


def test_top_level_override_wins():
    assert load_config(None, seed=11).seed == 11


def test_resolve_axis():
    assert resolve_axis("pairing") == ("training", "pairing")
    assert resolve_axis("training.alpha") == ("training", "alpha")
    assert resolve_axis("seed") == ("", "seed")
    with pytest.raises(ValueError):
        resolve_axis("bogus")
    with pytest.raises(ValueError):
        resolve_axis("training.bogus")


def test_with_value_revalidates():
    c = with_value(ExperimentConfig(), "alpha", 1.0)
    assert c.training.alpha == 1.0
    with pytest.raises(ValidationError):
        with_value(ExperimentConfig(), "alpha", -1.0)


def test_anchor_must_be_training_language():
    with pytest.raises(ValidationError, match="anchor"):
        build_config({"training": {"pairing": "anchor_frozen", "anchor_language": "ast"}})
