"""Policy registry -- resolves an autoscaler name from the scenario to its backend."""

from __future__ import annotations

from typing import Any

from gapsim.autoscalers.common import Policy, PolicyInput, ScalingDecision

VALID_POLICIES = ("khpa", "heat", "showar", "fixed-pid", "microscaler", "pbscaler", "none")


class StaticPolicy:
    """Never scales; replica counts stay where the scenario put them."""
    name = "none"

    def decide(self, inp: PolicyInput) -> list[ScalingDecision]:
        return []


def get_policy(name: str, params: dict[str, Any] | None = None, seed: int = 0) -> Policy:
    """Instantiate the named policy with scenario params."""
    params = dict(params or {})
    key = name.lower()
    try:
        if key == "khpa":
            from gapsim.autoscalers.khpa import KhpaPolicy
            return KhpaPolicy(**params)
        if key == "heat":
            from gapsim.autoscalers.heat import HeatPolicy
            return HeatPolicy(**params)
        if key == "showar":
            from gapsim.autoscalers.pid import PidPolicy
            return PidPolicy(**params)
        if key == "fixed-pid":
            from gapsim.autoscalers.pid import FixedPidPolicy
            return FixedPidPolicy.from_params(**params)
        if key == "microscaler":
            from gapsim.autoscalers.microscaler import MicroScalerPolicy
            return MicroScalerPolicy(**params)
        if key == "pbscaler":
            from gapsim.autoscalers.pbscaler import PbScalerPolicy
            params.setdefault("seed", seed)
            return PbScalerPolicy(**params)
        if key == "none":
            return StaticPolicy()
    except TypeError as e:
        raise ValueError(f"bad parameters for policy {name!r}: {e}") from None
    raise ValueError(f"Unknown policy {name!r}. Valid options: {', '.join(VALID_POLICIES)}")
