from fabmon.agent.sensors import (  # noqa: F401
    BUILTIN_KINDS,
    ReadFailure,
    SensorSpec,
    SensorUnavailable,
    default_sensor_specs,
    read_builtin,
)
from fabmon.agent.daemon import Agent, AgentConfig, OverheadLedger  # noqa: F401
from fabmon.agent.scheduling import SensorSchedule  # noqa: F401
from fabmon.agent.spool import SpoolRing  # noqa: F401
from fabmon.agent.external import run_external  # noqa: F401
