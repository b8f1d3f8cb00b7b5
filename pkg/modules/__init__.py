from .kge import KnowledgeGraph, SceneEmbedder, build_scene_embedder
from .reach_arena import ReachArena
from .policy import PolicyNetwork
from .controllers import NetworkController, RandomController, ScriptedReacher
from .a3c import A3CTrainer
from .evalstats import EvalReport, post_train_eval

__all__ = [
    "KnowledgeGraph",
    "SceneEmbedder",
    "build_scene_embedder",
    "ReachArena",
    "PolicyNetwork",
    "NetworkController",
    "RandomController",
    "ScriptedReacher",
    "A3CTrainer",
    "EvalReport",
    "post_train_eval",
]
