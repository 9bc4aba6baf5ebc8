from .base import CmdpEnv, rollout, write_trajectory
from .chain import ChainEnv, ChainMdpConfig, chain_exact_stats
from .lqr import LqrConfig, LqrEnv, lqr_step
from .mimo import MuMimoConfig, MuMimoEnv, mimo_step, rzf_precode, sample_channel


def make_env(name: str, params: dict | None = None) -> CmdpEnv:
    """Build an environment from its name and a JSON-style parameter dict.

    ``params`` may carry a full serialized config, or for ``lqr``/``chain``
    the keyword ``preset`` (``reduced``/``full`` or ``random``) plus a seed.
    """
    params = dict(params or {})
    if name == "lqr":
        preset = params.pop("preset", None)
        if preset == "reduced":
            return LqrEnv(LqrConfig.reduced(**params))
        if preset == "full":
            return LqrEnv(LqrConfig.full_scale(**params))
        if preset == "random":
            return LqrEnv(LqrConfig.random(**params))
        return LqrEnv(LqrConfig.from_json(params))
    if name == "mimo":
        return MuMimoEnv(MuMimoConfig.from_json(params))
    if name == "chain":
        preset = params.pop("preset", None)
        if preset == "random":
            return ChainEnv(ChainMdpConfig.random(**params))
        if preset == "two_state":
            return ChainEnv(ChainMdpConfig.symmetric_two_state(**params))
        return ChainEnv(ChainMdpConfig.from_json(params))
    raise ValueError(f"unknown environment {name!r}")


__all__ = ["CmdpEnv", "ChainEnv", "ChainMdpConfig", "LqrConfig", "LqrEnv", "MuMimoConfig", "MuMimoEnv",
           "chain_exact_stats", "lqr_step", "make_env", "mimo_step", "rollout", "rzf_precode", "sample_channel",
           "write_trajectory"]
