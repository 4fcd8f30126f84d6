from enum import Enum

class OptionRight(Enum):
    CALL = "C"
    PUT = "P"

class DensityKind(Enum):
    RISK_NEUTRAL = "risk_neutral"
    PHYSICAL = "physical"

class ViolationType(Enum):
    BUTTERFLY = "butterfly"
    CALL_SPREAD = "call_spread"
    BOUNDS = "bounds"
    CALENDAR = "calendar"

class ModelKind(Enum):
    MERTON = "merton"
    KOU = "kou"
    FLAT = "flat"

class Regime(Enum):
    MYOPIC = "myopic"
    FORESIGHT = "foresight"
    STATIONARY = "stationary"

class TreatmentFlag(Enum):
    TREATED_NOW = "treated_now"
    AFTER_FIRST = "after_first"
    AFTER_LAST = "after_last"

class ExposureMeasure(Enum):
    ESTABS = "share_estabs"
    EMP = "share_emp"
    SALES = "share_sales"

class SnapshotMode(Enum):
    LATEST = "latest"
    CONTEMPORANEOUS = "contemporaneous"

class BinMode(Enum):
    QUANTILE = "quantile"
    UNIFORM = "uniform"

class Stage(Enum):
    INGEST = "ingest"
    DEAMERICANIZE = "deamericanize"
    REPAIR = "repair"
    RND = "rnd"
    GARCH = "garch"
    KERNEL = "kernel"
    PROP1 = "prop1-verify"
    CALIBRATE = "calibrate"
    PANEL = "panel"
