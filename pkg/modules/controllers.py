"""
动作控制器与回合执行

三种控制器共用同一接口（begin_episode / act）：
- NetworkController：策略网络（采样或贪心）
- ScriptedReacher：解析逆运动学的脚本化策略，作为评估的上界参照
- RandomController：均匀随机动作，作为下界参照
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence
import numpy as np
import torch
from modules.kge import SceneEmbedder, SceneEmbedding
from modules.policy import PolicyNetwork, RecurrentState, greedy_actions, sample_actions
from modules.reach_arena import ACTION_SCALES, ReachArena, StepOutcome, TraceWriter


class Controller:
    name = "controller"

    def begin_episode(self, env: ReachArena, episode_seed: int):
        pass

    def act(self, observation: np.ndarray, env: ReachArena) -> List[int]:
        raise NotImplementedError


class NetworkController(Controller):
    """用策略网络选择动作；每个回合开始时清零 LSTM 状态"""

    name = "network"

    def __init__(
        self,
        model: PolicyNetwork,
        embedder: Optional[SceneEmbedder] = None,
        greedy: bool = False,
    ):
        self.model = model
        self.embedder = embedder
        self.greedy = greedy
        self._state: Optional[RecurrentState] = None
        self._kge: Optional[SceneEmbedding] = None
        self._generator = torch.Generator()

    def begin_episode(self, env: ReachArena, episode_seed: int):
        self._state = self.model.initial_state()
        self._generator.manual_seed(int(episode_seed))
        self._kge = None
        if self.embedder is not None and self.embedder.kge_dim > 0:
            target = env.state.target
            self._kge = self.embedder.for_episode(target.spec.kind, target.color_name)

    def act(self, observation: np.ndarray, env: ReachArena) -> List[int]:
        with torch.no_grad():
            output, self._state = self.model(observation, self._kge, self._state)
        if self.greedy:
            return greedy_actions(output)
        indices, _, _ = sample_actions(output, self._generator)
        return indices


class RandomController(Controller):
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def begin_episode(self, env: ReachArena, episode_seed: int):
        self._rng = np.random.default_rng([self.seed, int(episode_seed)])

    def act(self, observation: np.ndarray, env: ReachArena) -> List[int]:
        return [int(a) for a in self._rng.integers(0, len(ACTION_SCALES), size=env.n_joints)]


def _wrap_angle(theta: float) -> float:
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def _two_link_solutions(x: float, y: float, l1: float, l2: float) -> List[np.ndarray]:
    r = math.hypot(x, y)
    r = min(max(r, abs(l1 - l2)), l1 + l2)
    cos_t2 = (r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    cos_t2 = min(1.0, max(-1.0, cos_t2))
    base = math.atan2(y, x)
    solutions = []
    for t2 in (math.acos(cos_t2), -math.acos(cos_t2)):
        t1 = base - math.atan2(l2 * math.sin(t2), l1 + l2 * math.cos(t2))
        solutions.append(np.array([_wrap_angle(t1), t2]))
    return solutions


def solve_reach_ik(env: ReachArena) -> np.ndarray:
    """
    求使末端到达抓取点（n ≥ 3 时同时满足抓取朝向）的关节角。
    中间关节（第 2 到第 n-1 个之间）固定为 0，问题化为两连杆解析解；
    两个肘部解中取在关节范围内且离当前姿态最近的一个。
    """
    cfg = env.cfg
    lengths = list(cfg.link_lengths)
    n = len(lengths)
    target = env.state.target
    gx, gy = target.grasp_point
    phi = math.radians(target.spec.grasp_orientation)

    if n == 1:
        candidates = [np.array([math.atan2(gy, gx)])]
    elif n == 2:
        candidates = _two_link_solutions(gx, gy, lengths[0], lengths[1])
    else:
        wx = gx - lengths[-1] * math.cos(phi)
        wy = gy - lengths[-1] * math.sin(phi)
        candidates = []
        for t1, t2 in _two_link_solutions(wx, wy, lengths[0], sum(lengths[1:-1])):
            angles = np.zeros(n)
            angles[0], angles[1] = t1, t2
            angles[-1] = _wrap_angle(phi - t1 - t2)
            candidates.append(angles)

    low = np.array([r[0] for r in cfg.joint_ranges])
    high = np.array([r[1] for r in cfg.joint_ranges])
    current = env.state.joint_angles

    def cost(angles: np.ndarray) -> float:
        violation = float(np.sum(np.maximum(low - angles, 0) + np.maximum(angles - high, 0)))
        return violation * 1e3 + float(np.sum(np.abs(angles - current)))

    best = min(candidates, key=cost)
    return np.clip(best, low, high)


class ScriptedReacher(Controller):
    """每步为每个关节选择最接近逆解的增量"""

    name = "scripted"

    def __init__(self):
        self._goal: Optional[np.ndarray] = None

    def begin_episode(self, env: ReachArena, episode_seed: int):
        self._goal = solve_reach_ik(env)

    def act(self, observation: np.ndarray, env: ReachArena) -> List[int]:
        if self._goal is None:
            self._goal = solve_reach_ik(env)
        mpi = env.cfg.mpi
        deltas = np.asarray(ACTION_SCALES) * mpi
        actions = []
        for angle, goal in zip(env.state.joint_angles, self._goal):
            actions.append(int(np.argmin(np.abs(angle + deltas - goal))))
        return actions


@dataclass
class EpisodeResult:
    episode: int
    seed: int
    target_kind: str
    realized_color: str
    steps: int = 0
    total_return: float = 0.0
    final_rel_dist: float = float("nan")
    final_rel_deg: float = float("nan")
    success: bool = False
    joint_samples: List[np.ndarray] = field(default_factory=list)


def play_episode(
    env: ReachArena,
    controller: Controller,
    seed: int,
    episode: int = 0,
    trace: Optional[TraceWriter] = None,
    on_frame: Optional[Callable[[int, np.ndarray], None]] = None,
) -> EpisodeResult:
    """从给定种子的初始配置执行一个完整回合"""
    observation = env.reset(seed)
    controller.begin_episode(env, seed)
    target = env.state.target
    result = EpisodeResult(
        episode=episode,
        seed=int(seed),
        target_kind=target.spec.kind,
        realized_color=target.color_name,
    )
    if on_frame is not None:
        on_frame(0, observation)

    outcome: Optional[StepOutcome] = None
    while outcome is None or not outcome.done:
        actions = controller.act(observation, env)
        outcome = env.step(actions)
        observation = outcome.observation
        result.steps += 1
        result.total_return += outcome.reward
        result.joint_samples.append(env.state.joint_angles.copy())
        if trace is not None:
            trace.write_step(episode, env.state, actions, outcome)
        if on_frame is not None:
            on_frame(result.steps, observation)

    result.final_rel_dist = outcome.info["rel_dist"]
    result.final_rel_deg = outcome.info["rel_deg"]
    result.success = bool(outcome.info["success"])
    return result


def run_episodes(
    env: ReachArena, controller: Controller, seeds: Sequence[int]
) -> List[EpisodeResult]:
    return [play_episode(env, controller, s, episode=i) for i, s in enumerate(seeds)]
