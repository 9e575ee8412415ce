"""Exception types raised by the toolkit.

Every error carries a short machine-readable ``code`` so the command-line
driver can emit a structured record and pick an exit status.
"""


class FfRelayError(Exception):
    code = "error"
    exit_status = 3


class UnstableProcess(FfRelayError):
    code = "unstable_process"


class UnstableEffectiveNoise(UnstableProcess):
    code = "unstable_effective_noise"


class NotPSDSpectrum(FfRelayError):
    code = "not_psd_spectrum"


class NetworkError(FfRelayError):
    code = "network_error"
    exit_status = 2


class CyclicGraph(NetworkError):
    code = "cyclic_graph"


class DisconnectedSource(NetworkError):
    code = "disconnected_source"


class DimensionMismatch(FfRelayError):
    code = "dimension_mismatch"


class NoConvergence(FfRelayError):
    code = "no_convergence"


class UnitCircleEigenvalue(FfRelayError):
    code = "unit_circle_eigenvalue"


class InfeasibleTaps(FfRelayError):
    code = "infeasible_taps"


class InfeasibleGains(FfRelayError):
    code = "infeasible_gains"


class NoRootInUnitInterval(FfRelayError):
    code = "no_root_in_unit_interval"


class Infeasible(FfRelayError):
    code = "infeasible"


class SolverStall(FfRelayError):
    code = "solver_stall"


class IterationDiverged(FfRelayError):
    code = "iteration_diverged"


class PowerViolation(FfRelayError):
    code = "power_violation"


class ConfigError(FfRelayError):
    code = "config_parse"
    exit_status = 2
