"""Co-evolving agent skills and query-conditioned communication topologies."""
from .designer import EvolutionAction, MockDesigner, evolve
from .embedding import EmbeddingCache, HashingEmbedder
from .executor import MockAgentBackend, execute
from .mmgt import MmgtParams, ModelDims, forward
from .skill_bank import FailureRecord, Skill, SkillBank, seed_bank
from .topology import CommTopology, Mode, candidate_edges, sample_graph
from .trainer import TrainConfig, evaluate, run

__version__ = "0.1.0"

__all__ = [
    "CommTopology", "EmbeddingCache", "EvolutionAction", "FailureRecord", "HashingEmbedder",
    "MmgtParams", "MockAgentBackend", "MockDesigner", "Mode", "ModelDims", "Skill", "SkillBank",
    "TrainConfig", "candidate_edges", "evaluate", "evolve", "execute", "forward", "run",
    "sample_graph", "seed_bank",
]
