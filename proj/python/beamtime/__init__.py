"""Python access to the beamtime simulation core."""

import json

from . import _beamtime
from ._beamtime import BeamtimeError, ConfigError, bundled_scenario_path, bundled_scenarios

__all__ = [
    "BeamtimeError",
    "ConfigError",
    "Simulation",
    "bundled_scenario_path",
    "bundled_scenarios",
    "load_scenario",
    "replay",
    "run_scenario",
    "scaling",
]


def _text(config):
    return config if isinstance(config, str) else json.dumps(config)


def load_scenario(name_or_path):
    """Returns the scenario document for a bundled name or a file path, after validating it."""
    path = name_or_path
    if name_or_path in bundled_scenarios():
        path = bundled_scenario_path(name_or_path)
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    _beamtime.validate_scenario(json.dumps(doc))
    return doc


def run_scenario(config, out_dir):
    """Runs to the horizon, writes artifacts under out_dir and returns the summary."""
    return json.loads(_beamtime.run_scenario(_text(config), str(out_dir)))


def replay(log):
    return json.loads(_beamtime.replay(str(log)))


def scaling(n_images, ranks, stage="spotfinding", seed=1, io_mode="burstbuffer"):
    """Runs one job per rank count over the same images; one row per rank count."""
    return json.loads(_beamtime.scaling(n_images, list(ranks), stage, seed, io_mode))


class Simulation:
    def __init__(self, config, state_dir=None, files_root="."):
        self._sim = _beamtime.Simulation(_text(config), None if state_dir is None else str(state_dir), str(files_root))
        self.token = self._sim.token

    @property
    def now(self):
        return self._sim.now

    def run_until(self, t_s):
        return self._sim.run_until(t_s)

    def run(self):
        return self._sim.run()

    def summary(self):
        return json.loads(self._sim.summary())

    def snapshot(self):
        return json.loads(self._sim.snapshot())

    def request(self, method, path, body=None):
        """Sends one REST request; returns (status, decoded body)."""
        text = "" if body is None else json.dumps(body)
        status, content_type, raw = self._sim.request(method, path, text, self.token)
        if content_type.startswith("application/json"):
            return status, json.loads(raw)
        return status, raw
