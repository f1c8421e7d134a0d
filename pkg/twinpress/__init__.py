"""
twinpress: federated digital network twins.

Library layers, bottom-up:
- errors, seeding: exception hierarchy and named random sub-streams
- network: physical network, traffic datasets, cell clustering
- forecast: linear AR twin model and local training
- aggregation, executor, fedsync: aggregation rules and the V-twin / H-twin engine
- threat: fabricated-client attacks
- metrics, checkpoint, state_manager: quality/cost accounting and run artifacts
- caching: the DNT-assisted edge-caching sandbox
"""

__version__ = "0.1.0"
