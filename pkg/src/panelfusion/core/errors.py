"""Exception types shared across the package."""


class PanelFusionError(Exception):
    """Base class for all errors raised by panelfusion."""


class DimensionError(PanelFusionError, ValueError):
    pass


class ContractError(PanelFusionError, RuntimeError):
    pass


class NumericError(PanelFusionError, FloatingPointError):
    """A forward op produced NaN/Inf, or a numeric guard tripped (e.g. zero norm)."""


class ConfigError(PanelFusionError, ValueError):
    pass


class GeometryError(PanelFusionError, ValueError):
    pass


class CompatibilityError(PanelFusionError, ValueError):
    pass


class IntegrityError(PanelFusionError, ValueError):
    pass
