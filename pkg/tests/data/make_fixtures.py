"""Regenerate the JSON fixtures in this directory: ``python tests/data/make_fixtures.py``."""

from pathlib import Path

import numpy as np

from dynchance.instances import reservoir_model, reservoir_stages
from dynchance.io import dump_json, model_to_dict, stages_to_dict
from dynchance.timeseries import TimeSeriesModel

HERE = Path(__file__).parent


def main():
    dump_json(model_to_dict(reservoir_model()), HERE / "ar1_model.json")
    noise = TimeSeriesModel(alpha=[[[1.0], [1.0]]] * 3, beta=[[[1.0], [1.0]]] * 3,
                            mu=np.zeros((3, 2)), sigma=np.tile(np.eye(2), (3, 1, 1)))
    dump_json(model_to_dict(noise), HERE / "pure_noise_model.json")
    ma1 = TimeSeriesModel(alpha=[[[1.0]]] * 4, beta=[[[1.0, 0.3]]] * 4, mu=np.zeros((4, 1)),
                          sigma=np.ones((4, 1, 1)), xi_hist=[[0.0]], eps_hist=[[0.5]])
    dump_json(model_to_dict(ma1), HERE / "ma1_model.json")
    dump_json(stages_to_dict(reservoir_stages()), HERE / "reservoir_stages.json")
    for kind in ("P1", "P2", "P3", "P4"):
        dump_json({"model": "ar1_model.json", "stages": "reservoir_stages.json", "kind": kind, "seed": 0,
                   "qmc_points": 20000, "saa_n": 20000, "solver": {"starts": 3}},
                  HERE / f"config_{kind.lower()}.json")
    # releases capped at 2 cannot keep the level below 2.5 with probability 0.99
    dump_json(stages_to_dict(reservoir_stages(l_max=2.5, y_max=2.0)), HERE / "tight_stages.json")
    dump_json({"model": "ar1_model.json", "stages": "tight_stages.json", "kind": "P1", "p": 0.99,
               "solver": {"starts": 1}}, HERE / "config_tight.json")

    # two-stage reference problem with the release bounded in [0, 1]
    e1 = {
        "n": [1, 1], "M": 1, "p": 1 / 3, "h": [[1.0], [0.0]],
        "prob": {"A": [[[[-1.0]]], [[[0.0]], [[-1.0]]]], "B": [[[[1.0]]], [[[0.0]], [[1.0]]]],
                 "b": [[0.0], [0.0]]},
        "hard": {"A": [[np.zeros((0, 1)).tolist()], [np.zeros((2, 1)).tolist(), [[1.0], [-1.0]]]],
                 "B": [[np.zeros((0, 1)).tolist()], [np.zeros((2, 1)).tolist()] * 2],
                 "b": [[], [1.0, 0.0]]},
    }
    dump_json(e1, HERE / "example1_stages.json")
    two = TimeSeriesModel(alpha=[[[1.0]]] * 2, beta=[[[1.0]]] * 2, mu=np.zeros((2, 1)), sigma=np.ones((2, 1, 1)))
    dump_json(model_to_dict(two), HERE / "two_stage_model.json")
    dump_json({"model": "two_stage_model.json", "stages": "example1_stages.json", "kind": "P3"},
              HERE / "config_example1.json")
    dump_json({"F": [[[]], [[1.5]]], "f": [[2 / 3], [0.0]]}, HERE / "example1_policy.json")
    dump_json({"xi": [[[-0.5], [0.2]], [[0.3], [0.9]], [[0.9], [-0.4]], [[-1.0], [0.5]]]},
              HERE / "example1_scenarios.json")

    (HERE / "malformed_model.json").write_text('{"alpha": [[[1.0]]], "beta": [[[1.0]]],\n "mu": [[0.0]]\n')
    dump_json({"alpha": [[[1.0]]], "beta": [[[1.0]]], "mu": [[0.0]]}, HERE / "missing_field_model.json")


if __name__ == "__main__":
    main()
