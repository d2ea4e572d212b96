"""Appendable-block blockchain for gateway-based IoT networks.

Per-device blocks are inserted once by consensus (witness voting or adapted
PBFT) and their ledgers keep growing afterwards, so devices append
concurrently without invalidating each other.  The package bundles the chain
core, the consensus engine, an event-driven gateway node, simulated device
fleets, a deterministic network harness, and a scenario benchmark CLI.
"""

from .chain import (
    Block,
    BlockHeader,
    Blockchain,
    DeviceInfo,
    Reject,
    Transaction,
    Violation,
    build_transaction,
    verify_chain,
)
from .consensus import (
    Algorithm,
    ConsensusConfig,
    ConsensusDecision,
    Vote,
    elect_leader,
    quorum,
    verify_decision,
)
from .crypto import KeyPair, generate_keypair, sha256, sign, verify
from .devices import DeviceHub, SimDevice
from .gateway import GatewayNode, ServiceTimes, StatusCode
from .journal import JournalWriter, replay_journal, verify_journal
from .metrics import MetricsSink
from .network import (
    ByzantineStrategy,
    InMemoryNetwork,
    Latency,
    NetConfig,
    SocketNetwork,
)
from .scenario import (
    SCENARIO_GRID,
    MetricsReport,
    ScenarioConfig,
    ScenarioError,
    ScenarioResult,
    compare_consensus,
    emit_report,
    run_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "Block",
    "BlockHeader",
    "Blockchain",
    "ByzantineStrategy",
    "ConsensusConfig",
    "ConsensusDecision",
    "DeviceHub",
    "DeviceInfo",
    "GatewayNode",
    "InMemoryNetwork",
    "JournalWriter",
    "KeyPair",
    "Latency",
    "MetricsReport",
    "MetricsSink",
    "NetConfig",
    "Reject",
    "SCENARIO_GRID",
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioResult",
    "ServiceTimes",
    "SimDevice",
    "SocketNetwork",
    "StatusCode",
    "Transaction",
    "Violation",
    "Vote",
    "build_transaction",
    "compare_consensus",
    "elect_leader",
    "emit_report",
    "generate_keypair",
    "quorum",
    "replay_journal",
    "run_scenario",
    "sha256",
    "sign",
    "verify",
    "verify_chain",
    "verify_decision",
    "verify_journal",
]
