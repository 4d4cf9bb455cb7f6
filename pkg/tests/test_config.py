"""Experiment file schema: parsing, defaults, named-field validation."""

import dataclasses

import pytest

from quadfuse import config
from quadfuse.config import ConfigError, ExperimentConfig, parse_experiment
from quadfuse.simkit import Condition

FULL = """
[dataset]
seed = 99
conditions = clear_day*3, fog:0.02*2, snow:1.5*1
n_cars = 3
n_pedestrians = 2

[modality]
inputs = CGLR
proposals = L
depth_transform = off
gamma_weighting = on

[grid]
x_min = -12.0
x_max = 12.0
z_min = 0.0
z_max = 24.0
cell = 3.0

[model]
d = 6
patch_factor = 4
n_layers = 2
top_k = 6

[sensors]
width = 32
height = 16
focal = 24.0

[train]
steps = 50
lr = 0.005
optimizer = momentum

[eval]
iou_car = 0.3
iou_pedestrian = 0.15
n_recall = 20
"""


def fields_of(err: ConfigError):
    return [field for field, _ in err.problems]


class TestParsing:
    def test_empty_text_gives_defaults(self):
        assert parse_experiment("") == ExperimentConfig()

    def test_full_file_round_trip(self):
        cfg = parse_experiment(FULL)
        assert cfg.seed == 99
        assert cfg.conditions == ((Condition("clear_day"), 3),
                                  (Condition("fog", beta=0.02), 2),
                                  (Condition("snow", lam=1.5), 1))
        assert cfg.inputs == ("C", "G", "L", "R")
        assert cfg.proposals == ("L",)
        assert not cfg.depth_transform
        assert cfg.optimizer == "momentum"
        assert cfg.iou_pedestrian == 0.15

    def test_proposals_follow_inputs_when_omitted(self):
        cfg = parse_experiment("[modality]\ninputs = GL\n")
        assert cfg.proposals == ("G", "L")

    def test_modalities_canonical_order(self):
        cfg = parse_experiment("[modality]\ninputs = RLGC\n")
        assert cfg.inputs == ("C", "G", "L", "R")

    def test_unknown_section_and_key_named(self):
        with pytest.raises(ConfigError) as err:
            parse_experiment("[typo]\na = 1\n[train]\nstepz = 3\n")
        assert set(fields_of(err.value)) == {"typo", "train.stepz"}

    def test_unparseable_value_named(self):
        with pytest.raises(ConfigError) as err:
            parse_experiment("[train]\nlr = fast\n")
        assert fields_of(err.value) == ["train.lr"]

    def test_condition_entry_requires_count(self):
        with pytest.raises(ConfigError) as err:
            parse_experiment("[dataset]\nconditions = clear_day\n")
        assert fields_of(err.value) == ["dataset.conditions"]

    def test_syntax_error_reported(self):
        with pytest.raises(ConfigError):
            parse_experiment("no section header")

    def test_parse_and_invariant_problems_combined(self):
        with pytest.raises(ConfigError) as err:
            parse_experiment("[grid]\ncell = -2\n[typo]\nx = 1\n")
        assert set(fields_of(err.value)) == {"typo", "grid.cell"}

    def test_load_experiment_reads_file(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(FULL, encoding="utf-8")
        assert config.load_experiment(path) == parse_experiment(FULL)


class TestValidation:
    def test_lidar_required(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(inputs=("C", "G"), proposals=("C", "G"))
        assert "modality.inputs" in fields_of(err.value)

    def test_proposals_subset_of_inputs(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(inputs=("C", "L"), proposals=("C", "G", "L"))
        assert fields_of(err.value) == ["modality.proposals"]

    def test_partial_proposal_set_rejected(self):
        # between "L alone" and "everything" there is no fused map to read
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(proposals=("C", "L"))
        assert fields_of(err.value) == ["modality.proposals"]

    def test_lidar_only_proposals_accepted(self):
        cfg = ExperimentConfig(proposals=("L",))
        assert cfg.pipeline_config().proposal_source == "lidar"

    @pytest.mark.parametrize("overrides,field", [
        ({"seed": -1}, "dataset.seed"),
        ({"seed": 2 ** 64}, "dataset.seed"),
        ({"n_cars": -1}, "dataset.n_cars"),
        ({"n_pedestrians": -2}, "dataset.n_pedestrians"),
        ({"cell": 0.0}, "grid.cell"),
        ({"x_max": -25.0}, "grid.x_max"),
        ({"x_max": 24.7}, "grid.x_max"),
        ({"z_max": 6.0}, "grid.z_max"),
        ({"d": 0}, "model.d"),
        ({"patch_factor": 0}, "model.patch_factor"),
        ({"n_layers": 0}, "model.n_layers"),
        ({"top_k": 0}, "model.top_k"),
        ({"width": 30}, "sensors.width"),
        ({"height": 0}, "sensors.height"),
        ({"focal": 0.0}, "sensors.focal"),
        ({"steps": 0}, "train.steps"),
        ({"lr": 0.0}, "train.lr"),
        ({"optimizer": "sgd"}, "train.optimizer"),
        ({"iou_car": 1.0}, "eval.iou_car"),
        ({"iou_pedestrian": 0.0}, "eval.iou_pedestrian"),
        ({"n_recall": 0}, "eval.n_recall"),
    ])
    def test_each_violation_names_its_field(self, overrides, field):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(**overrides)
        assert field in fields_of(err.value)

    def test_negative_condition_count(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(conditions=((Condition("clear_day"), -1),))
        assert "dataset.conditions" in fields_of(err.value)

    def test_multiple_violations_all_named(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig(n_cars=-1, steps=0, focal=-1.0)
        assert set(fields_of(err.value)) == {"dataset.n_cars", "train.steps",
                                             "sensors.focal"}


class TestDerived:
    def test_pipeline_config_wiring(self):
        cfg = parse_experiment(FULL)
        pc = cfg.pipeline_config()
        assert pc.d == 6
        assert pc.modalities == ("C", "G", "L", "R")
        assert pc.proposal_source == "lidar"
        assert not pc.depth_transform
        assert pc.x_range == (-12.0, 12.0)
        assert pc.n_layers == 2

    def test_sim_config_keeps_margin(self):
        cfg = parse_experiment(FULL)
        sc = cfg.sim_config()
        assert sc.x_range == (-6.0, 6.0)
        assert sc.z_range == (6.0, 18.0)

    def test_train_and_eval_configs(self):
        cfg = parse_experiment(FULL)
        assert cfg.train_config().n_steps == 50
        assert cfg.train_config().optimizer == "momentum"
        assert cfg.eval_config().iou_thresholds == (0.3, 0.15)
        assert cfg.eval_config().n_recall == 20

    def test_rig_matches_sensor_section(self):
        cfg = parse_experiment(FULL)
        rig = cfg.rig()
        assert rig.rgb_cam.width == 32
        assert rig.rgb_cam.height == 16
        assert rig.x_range == (-12.0, 12.0)

    def test_with_seed_revalidates(self):
        cfg = ExperimentConfig().with_seed(7)
        assert cfg.seed == 7
        with pytest.raises(ConfigError):
            ExperimentConfig().with_seed(-3)


class TestFingerprints:
    def test_fingerprint_survives_json(self):
        import json
        cfg = parse_experiment(FULL)
        fp = cfg.fingerprint()
        assert json.loads(json.dumps(fp)) == fp
        assert fp["dataset"]["conditions"] == ["clear_day*3", "fog:0.02*2",
                                               "snow:1.5*1"]
        assert fp["modality"]["inputs"] == "CGLR"

    def test_data_fingerprint_ignores_model_knobs(self):
        a = parse_experiment(FULL)
        b = dataclasses.replace(a, d=12, inputs=("C", "L"),
                                proposals=("C", "L"), steps=7)
        assert a.data_fingerprint() == b.data_fingerprint()
        assert a.model_fingerprint() != b.model_fingerprint()

    def test_seed_changes_data_fingerprint(self):
        a = ExperimentConfig()
        assert a.data_fingerprint() != a.with_seed(5).data_fingerprint()
