"""Exception types shared across the package.

Every failure carries a short machine-readable ``code`` (``"cg_stalled"``,
``"no_adjoint"``, ...) so the CLI and the experiment runner can record it in
CSV rows without parsing messages.
"""


class UdmError(Exception):
    code = "udm_error"

    def __init__(self, message="", code=None, **details):
        if code is not None:
            self.code = code
        self.details = details
        super().__init__(f"{self.code}: {message}" if message else self.code)


class CGStalled(UdmError):
    code = "cg_stalled"

    def __init__(self, residual, iterations):
        super().__init__(
            f"relative residual {residual:.3e} after {iterations} iterations",
            residual=residual,
            iterations=iterations,
        )
        self.residual = residual
        self.iterations = iterations


class ProxDiverged(UdmError):
    code = "prox_diverged"


class SamplerNaN(UdmError):
    code = "sampler_nan"

    def __init__(self, n, k):
        super().__init__(f"non-finite state at outer step n={n}, module k={k}", n=n, k=k)
        self.n = n
        self.k = k


class TrainingDiverged(UdmError):
    code = "training_diverged"


class FormatError(UdmError):
    code = "bad_format"


class ConfigError(UdmError):
    code = "bad_config"
