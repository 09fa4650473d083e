"""Digital twin of a four-chamber pharmaceutical stability facility.

Subsystems: moist-air property math (psychro), lumped-parameter chamber
plant (plant), split-range PID control and autotuning (control, tuning),
PLC-style register map and wire protocol (regmap, wire), MQTT telemetry
gateway (mqtt, telemetry, gateway), role/audit/alarm supervision
(supervisory), compliance historian with HTTP API (historian, httpapi),
and the scenario orchestrator (facility, config, cli).
"""

__version__ = "0.1.0"
