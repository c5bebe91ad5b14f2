"""Parameter-adaptive policy: nominal net plus linear parameter correction.

The control applied at state s under plant parameters theta is

    u = clamp( net_action(s) + net_sens(s) @ (theta - theta_nom), +-u_max )

where net_action imitates the horizon solver's first optimal action at the
nominal parameters and net_sens imitates its parameter sensitivity row.
At theta = theta_nom the correction term is identically zero, so the policy
reduces to the clamped nominal net exactly.

A policy bundle on disk is a directory holding the two model files and a
JSON metadata file with theta_nom and the saturation bound.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net import Mlp, N_ENCODED, TrainConfig, encode_state, train
from .plant import N_ACTION, N_PARAM

BUNDLE_VERSION = 1
_META_NAME = "bundle.json"
_ACTION_NAME = "action.mlp"
_SENS_NAME = "sens.mlp"


class BundleFormatError(RuntimeError):
    """Bundle directory is missing files or its metadata is inconsistent."""


@dataclass
class AdaptivePolicy:
    """Two trained nets, the nominal parameter vector, and the clamp bound."""

    net_action: Mlp
    net_sens: Mlp
    theta_nom: np.ndarray  # (N_PARAM,)
    u_max: float

    def __post_init__(self):
        self.theta_nom = np.asarray(self.theta_nom, dtype=float)

    def validate(self) -> None:
        self.net_action.validate()
        self.net_sens.validate()
        if self.net_action.layer_sizes[0] != N_ENCODED:
            raise ValueError("action net must take the encoded state")
        if self.net_sens.layer_sizes[0] != N_ENCODED:
            raise ValueError("sensitivity net must take the encoded state")
        if self.net_action.layer_sizes[-1] != N_ACTION:
            raise ValueError(f"action net must output {N_ACTION} value(s)")
        if self.net_sens.layer_sizes[-1] != N_ACTION * N_PARAM:
            raise ValueError(
                f"sensitivity net must output {N_ACTION * N_PARAM} values")
        if self.theta_nom.shape != (N_PARAM,) or not np.all(np.isfinite(self.theta_nom)):
            raise ValueError("theta_nom must be a finite length-"
                             f"{N_PARAM} vector")
        if not (np.isfinite(self.u_max) and self.u_max > 0):
            raise ValueError("u_max must be positive")

    def act(self, s: np.ndarray, theta: np.ndarray) -> float:
        """Saturated adaptive control at state s for plant parameters theta."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAM,):
            raise ValueError(f"theta must have {N_PARAM} entries, "
                             f"got shape {theta.shape}")
        x = encode_state(s)
        u = float(self.net_action.forward(x)[0])
        sens_row = self.net_sens.forward(x).reshape(N_ACTION, N_PARAM)
        u = u + float(sens_row[0] @ (theta - self.theta_nom))
        return float(np.clip(u, -self.u_max, self.u_max))

    def save(self, bundle_dir) -> None:
        self.validate()
        bundle_dir = Path(bundle_dir)
        bundle_dir.mkdir(parents=True, exist_ok=True)
        self.net_action.save(bundle_dir / _ACTION_NAME)
        self.net_sens.save(bundle_dir / _SENS_NAME)
        meta = {
            "version": BUNDLE_VERSION,
            "theta_nom": [float(v) for v in self.theta_nom],
            "u_max": float(self.u_max),
            "files": {"action": _ACTION_NAME, "sensitivity": _SENS_NAME},
        }
        (bundle_dir / _META_NAME).write_text(json.dumps(meta, indent=2))

    @classmethod
    def train_from_dataset(
        cls,
        data,
        theta_nom: np.ndarray,
        u_max: float,
        *,
        action_cfg: TrainConfig = TrainConfig(),
        sens_cfg: TrainConfig = TrainConfig(),
        action_hidden=None,
        sens_hidden=None,
    ) -> tuple["AdaptivePolicy", dict]:
        """Fit both nets on a solver dataset and assemble the policy.

        Returns the policy and a training summary holding, per net, the best
        validation MSE on the normalized scale and the output scaling needed
        to express it in physical units.
        """
        net_action = train(data, "action", hidden=action_hidden, cfg=action_cfg)
        net_sens = train(data, "sensitivity", hidden=sens_hidden, cfg=sens_cfg)
        pol = cls(net_action=net_action, net_sens=net_sens,
                  theta_nom=theta_nom, u_max=u_max)
        pol.validate()
        summary = {}
        for name, m in (("action", net_action), ("sensitivity", net_sens)):
            best_val = float(m.history["best_val"])
            out_std = [float(v) for v in np.atleast_1d(m.out_std)]
            summary[name] = {
                "best_val_mse_normalized": best_val,
                "out_std": out_std,
                # One RMSE figure in physical units: sqrt of the normalized
                # MSE scaled by the RMS output spread.
                "val_rmse": float(np.sqrt(best_val * np.mean(np.square(out_std)))),
            }
        return pol, summary

    @classmethod
    def load(cls, bundle_dir) -> "AdaptivePolicy":
        bundle_dir = Path(bundle_dir)
        meta_path = bundle_dir / _META_NAME
        if not meta_path.is_file():
            raise BundleFormatError(f"no {_META_NAME} in {bundle_dir}")
        try:
            meta = json.loads(meta_path.read_text())
            version = int(meta["version"])
            theta_nom = np.array([float(v) for v in meta["theta_nom"]])
            u_max = float(meta["u_max"])
            files = meta["files"]
        except (ValueError, KeyError, TypeError) as exc:
            raise BundleFormatError(f"corrupt bundle metadata: {exc}") from exc
        if version != BUNDLE_VERSION:
            raise BundleFormatError(f"unsupported bundle version {version}")
        pol = cls(
            net_action=Mlp.load(bundle_dir / files["action"]),
            net_sens=Mlp.load(bundle_dir / files["sensitivity"]),
            theta_nom=theta_nom,
            u_max=u_max,
        )
        pol.validate()
        return pol
