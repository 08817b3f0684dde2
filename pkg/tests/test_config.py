import json

import pytest

from taginv.config import ConfigError, RunConfig, from_dict, loads


def test_defaults_describe_the_reference_instance():
    cfg = RunConfig()
    assert cfg.grid.dims == (48, 48, 48)
    assert cfg.sequence.frames == 6 and cfg.sequence.gamma == (0.4, 1.0, 3.0) and cfg.sequence.noise == 0.01
    assert cfg.prior.templates == 8 and cfg.prior.near_match
    assert cfg.solver.loops == 8 and cfg.solver.loops_later == 4
    assert cfg.sampler.rho_star == 100.0 and cfg.solver.squaring_steps == 7


def test_resolved_round_trip():
    cfg = loads('{"seed": 4, "sequence": {"blur": "iso"}, "solver": {"loops": 2}}')
    again = loads(cfg.to_json())
    assert again.resolved() == cfg.resolved()
    assert again.sequence.gamma == (1.0, 1.0, 1.0) and again.seed == 4


def test_resolved_is_complete_and_hides_de_seed():
    doc = RunConfig().resolved()
    assert set(doc) == {"grid", "sequence", "prior", "sampler", "de", "adam", "solver", "metrics", "seed"}
    assert "seed" not in doc["de"]
    with pytest.raises(ConfigError, match="de.seed"):
        from_dict({"de": {"seed": 3}})


def test_partial_sections_keep_the_other_defaults():
    cfg = loads('{"solver": {"ablation": "no-psf"}, "adam": {"steps": 7}}')
    assert cfg.solver.loops == 8 and cfg.solver.ablation == "no-psf"
    assert cfg.adam.steps == 7 and cfg.adam.lr == 2e-3
    # a blur preset change re-resolves gamma and noise
    cfg = loads('{"sequence": {"blur": "thick"}}')
    assert cfg.sequence.gamma == (0.4, 0.4, 4.0) and cfg.sequence.noise == 0.0


def test_explicit_overrides_beat_the_preset():
    cfg = loads('{"sequence": {"blur": "iso", "gamma": [0, 0, 0], "noise": 0.02}}')
    assert cfg.sequence.gamma == (0.0, 0.0, 0.0) and cfg.sequence.noise == 0.02


@pytest.mark.parametrize("text,line,needle", [
    ('{\n "grid": {"dims": [8, 8, 8]},\n "bogus": {}\n}', 3, "unknown section"),
    ('{\n "sampler": {\n  "steps": 8,\n  "rho": 1\n }\n}', 4, "sampler.rho"),
    ('{\n "seed": -1\n}', 2, "seed"),
    ('{\n "prior": {"kind": "vae"}\n}', 2, "prior"),
    ('{\n "grid": {"dims": [8, 8, 8]},\n "solver": [1]\n}', 3, "must be an object"),
    ('{\n "grid": {"dims": [8, 8, 8]\n}', 3, "invalid JSON"),
])
def test_errors_name_the_line(text, line, needle):
    with pytest.raises(ConfigError) as err:
        loads(text)
    assert err.value.line == line
    assert needle in str(err.value)


def test_non_object_document():
    with pytest.raises(ConfigError, match="JSON object"):
        loads("[1, 2]")


@pytest.mark.parametrize("doc", [
    {"grid": {"dims": [3, 8, 8]}},
    {"sequence": {"blur": "fog"}},
    {"sequence": {"frames": 0}},
    {"sequence": {"alpha": [1, 2, 3]}},
    {"prior": {"sigma": 0}},
    {"adam": {"lr": 0}},
    {"de": {"population": 2}},
    {"sampler": {"steps": 1}},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        loads(json.dumps(doc))
