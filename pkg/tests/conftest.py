import copy
import json

import pytest

from dhsynth.model import bundled_model, bundled_model_text, model_from_dict
from dhsynth.synthesis import synthesize


def heating_dict():
    return json.loads(bundled_model_text("heating"))


def decay_dict(w_max=0.0, delay=0.1, rho=0.05, tau=0.1):
    """One-mode 1-D model xdot = -x on S = [-1, 2] without edges."""
    return {
        "name": "decay", "state_dim": 1, "w_max": w_max,
        "modes": [{
            "name": "q1", "delay": delay, "A": [[-1.0]], "B": [[0.0]], "C": [[1.0]],
            "invariant": {"lo": [-1.0], "hi": [2.0]}, "initial": {"lo": [0.9], "hi": [1.1]},
            "safe": {"lo": [-1.0], "hi": [2.0]}, "reach": {"rho": [rho], "tau": tau, "eps": 0.01},
        }],
        "edges": [],
    }


def shifted_pair_dict():
    """Two 1-D decaying modes; e1 adds 3 on reset, so only low states may take it."""
    mode = {"delay": 0.1, "A": [[-1.0]], "B": [[0.0]], "C": [[1.0]],
            "reach": {"rho": [0.05], "tau": 0.1, "eps": 0.01}}
    q1 = dict(copy.deepcopy(mode), name="q1", invariant={"lo": [-1.0], "hi": [10.0]},
              initial={"lo": [4.0], "hi": [8.0]}, safe={"lo": [-1.0], "hi": [10.0]})
    q2 = dict(copy.deepcopy(mode), name="q2", invariant={"lo": [-1.0], "hi": [6.0]},
              initial={"lo": [1.0], "hi": [2.0]}, safe={"lo": [-1.0], "hi": [6.0]})
    return {
        "name": "shifted_pair", "state_dim": 1, "w_max": 0.05, "modes": [q1, q2],
        "edges": [
            {"name": "e1", "from": "q1", "to": "q2", "guard": {"lo": [-1.0], "hi": [10.0]},
             "jump_delay": 0.5, "reset": {"M": [[1.0]], "b": [3.0]}},
            {"name": "e2", "from": "q2", "to": "q1", "guard": {"lo": [-1.0], "hi": [6.0]},
             "jump_delay": 0.5, "reset": "identity"},
        ],
    }


@pytest.fixture(scope="session")
def heating():
    return bundled_model("heating")


@pytest.fixture(scope="session")
def lowpass():
    return bundled_model("lowpass_filter")


@pytest.fixture(scope="session")
def predator():
    return bundled_model("predator_prey")


@pytest.fixture(scope="session")
def heating_synth(heating):
    return synthesize(heating)


@pytest.fixture(scope="session")
def shifted_pair():
    return model_from_dict(shifted_pair_dict())


@pytest.fixture(scope="session")
def shifted_pair_synth(shifted_pair):
    return synthesize(shifted_pair)
