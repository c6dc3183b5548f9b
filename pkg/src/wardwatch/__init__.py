"""wardwatch: clinic hygiene workflow monitoring.

Subsystems:

* events: sensor reading and domain event vocabulary, wire codecs
* registry: rooms, persons, users, devices, sterilization traceability
* workflow_model / workflow_dsl: workflow documents, validation, compilation
* correlation: readings -> domain events (ordered buffer, pairing rules)
* engine: workflow instance execution, guards, violations, alerts
* store: append-only persistence, statistics, contact network
* sim: scripted sensor-network simulation with a seeded channel model
* pipeline: wires the above into one serialized processing path
* gateway: REST + live feed HTTP surface
* cli: operator commands
"""

__version__ = "0.1.0"
