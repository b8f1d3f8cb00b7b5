"""
桌面尺度的图像抓取点接近环境

平面 n 连杆机械臂，三种目标（杯子、瓶子、麦片盒）随机摆放在工作区内，
智能体只看到 RGB 图像。奖励、动作集、成功阈值、回合长度与颜色随机化
均按 MDP 定义实现。
"""

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
from config.config import EnvConfig
from utils.logger import rl_logger

# 动作顺序固定：[−MPI, −MPI/10, −MPI/100, 0, +MPI/100, +MPI/10, +MPI]
ACTION_SCALES = (-1.0, -0.1, -0.01, 0.0, 0.01, 0.1, 1.0)
N_ACTIONS = len(ACTION_SCALES)

BACKGROUND = (0.5, 0.5, 0.5)
LINK_WIDTH = 0.014
VIEW_MARGIN = 0.08
SUCCESS_REWARD = 100.0


class ArenaConfigError(ValueError):
    """环境几何配置无效"""


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    base_color: Tuple[float, float, float]
    base_color_name: str
    dr_color: Tuple[float, float, float]
    dr_color_name: str
    grasp_offset: Tuple[float, float]  # 相对物体原点（米）
    grasp_orientation: float  # 度

    def colors(self, dr_enabled: bool) -> List[Tuple[Tuple[float, float, float], str]]:
        options = [(self.base_color, self.base_color_name)]
        if dr_enabled:
            options.append((self.dr_color, self.dr_color_name))
        return options


TARGETS: Dict[str, TargetSpec] = {
    # 把手处抓取，倾斜方向
    "mug": TargetSpec(
        "mug", (1.0, 0.0, 0.0), "red", (0.0, 0.0, 1.0), "blue", (0.035, 0.0), 45.0
    ),
    # 瓶塞处抓取，垂直方向
    "bottle": TargetSpec(
        "bottle", (1.0, 1.0, 0.0), "yellow", (0.4, 0.0, 0.9), "purple", (0.0, 0.035), 90.0
    ),
    # 右侧边缘抓取，平行方向
    "cereal_box": TargetSpec(
        "cereal_box",
        (0.55, 0.27, 0.07),
        "brown",
        (0.5, 0.7, 0.9),
        "light_blue",
        (0.04, 0.01),
        0.0,
    ),
}
TARGET_KINDS = tuple(TARGETS)
MAX_GRASP_OFFSET = max(math.hypot(*t.grasp_offset) for t in TARGETS.values())


@dataclass
class PlacedTarget:
    spec: TargetSpec
    position: np.ndarray
    color: Tuple[float, float, float]
    color_name: str

    @property
    def grasp_point(self) -> np.ndarray:
        return self.position + np.asarray(self.spec.grasp_offset)


@dataclass
class EnvState:
    joint_angles: np.ndarray
    target: Optional[PlacedTarget]
    step_count: int = 0


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: Dict[str, float] = field(default_factory=dict)


def action_decode(index: int, mpi: float) -> float:
    """动作索引 → 关节增量（弧度）"""
    if not isinstance(index, (int, np.integer)) or not 0 <= index < N_ACTIONS:
        raise ValueError(f"动作索引必须在 [0,{N_ACTIONS}) 内，实际 {index!r}")
    return ACTION_SCALES[int(index)] * mpi


def wrap_degrees(a: float, b: float) -> float:
    """两个朝向之间的绝对夹角，范围 [0,180]"""
    return abs((a - b + 180.0) % 360.0 - 180.0)


def reach_reward(
    rel_dist: float, rel_deg: float, success_dist: float, success_deg: float
) -> Tuple[float, bool]:
    success = rel_dist < success_dist and rel_deg < success_deg
    if success:
        return SUCCESS_REWARD, True
    return -2.0 * rel_dist**2 - rel_deg / 70.0, False


def forward_kinematics(angles: Sequence[float], lengths: Sequence[float]) -> Tuple[np.ndarray, float]:
    """返回各关节位置（含基座和末端，(n+1)×2）和末端朝向（度）"""
    points = np.zeros((len(lengths) + 1, 2))
    heading = 0.0
    for i, (theta, length) in enumerate(zip(angles, lengths)):
        heading += theta
        points[i + 1] = points[i] + length * np.array([math.cos(heading), math.sin(heading)])
    return points, math.degrees(heading)


def reachable_annulus(lengths: Sequence[float]) -> Tuple[float, float]:
    total = float(sum(lengths))
    longest = float(max(lengths))
    return max(0.0, longest - (total - longest)), total


def check_geometry(cfg: EnvConfig, error_cls=ArenaConfigError):
    """工作区（含抓取点偏移）必须位于机械臂可达环形区域内"""
    x_min, x_max, y_min, y_max = cfg.workspace
    margin = MAX_GRASP_OFFSET
    x_lo, x_hi, y_lo, y_hi = x_min - margin, x_max + margin, y_min - margin, y_max + margin

    # 基座在原点
    nearest = math.hypot(min(max(0.0, x_lo), x_hi), min(max(0.0, y_lo), y_hi))
    farthest = max(math.hypot(x, y) for x in (x_lo, x_hi) for y in (y_lo, y_hi))
    r_min, r_max = reachable_annulus(cfg.link_lengths)

    if nearest < r_min or farthest > r_max:
        raise error_cls(
            f"env.workspace: 工作区距离范围 [{nearest:.3f}, {farthest:.3f}] m "
            f"超出可达范围 [{r_min:.3f}, {r_max:.3f}] m"
        )


class Renderer:
    """平面着色的软件光栅化器"""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        x_min, x_max, y_min, y_max = cfg.workspace
        cx, cy = (x_min + x_max) / 2.0, (y_min + y_max) / 2.0
        half = max(x_max - x_min, y_max - y_min) / 2.0 + VIEW_MARGIN
        size = cfg.image_size
        pixel = 2.0 * half / size

        # 像素中心对应的世界坐标
        centers = (np.arange(size) + 0.5) * pixel
        self.xs, self.ys = np.meshgrid(cx - half + centers, cy + half - centers)
        self.pixel = pixel

    def _rect(self, cx: float, cy: float, half_w: float, half_h: float) -> np.ndarray:
        return (np.abs(self.xs - cx) <= half_w) & (np.abs(self.ys - cy) <= half_h)

    def _circle(self, cx: float, cy: float, radius: float) -> np.ndarray:
        return (self.xs - cx) ** 2 + (self.ys - cy) ** 2 <= radius**2

    def _segment(self, p: np.ndarray, q: np.ndarray, width: float) -> np.ndarray:
        d = q - p
        length2 = float(d @ d)
        if length2 == 0.0:
            return self._circle(p[0], p[1], width / 2.0)
        t = ((self.xs - p[0]) * d[0] + (self.ys - p[1]) * d[1]) / length2
        t = np.clip(t, 0.0, 1.0)
        dx = self.xs - (p[0] + t * d[0])
        dy = self.ys - (p[1] + t * d[1])
        return dx**2 + dy**2 <= (width / 2.0) ** 2

    def _target_masks(self, target: PlacedTarget) -> List[Tuple[np.ndarray, Tuple[float, float, float]]]:
        x, y = target.position
        color = target.color
        kind = target.spec.kind
        if kind == "mug":
            body = self._circle(x, y, 0.025)
            handle = self._rect(x + 0.03, y, 0.012, 0.007)
            return [(body | handle, color)]
        if kind == "bottle":
            body = self._rect(x, y - 0.0025, 0.012, 0.0275)
            cap_color = tuple(0.5 * c for c in color)
            cap = self._rect(x, y + 0.03, 0.007, 0.005)
            return [(body, color), (cap, cap_color)]
        return [(self._rect(x, y, 0.04, 0.025), color)]

    def render(self, state: EnvState) -> np.ndarray:
        size = self.cfg.image_size
        image = np.empty((size, size, 3), dtype=np.float32)
        image[:] = BACKGROUND

        # 抓取点不绘制
        if state.target is not None:
            for mask, color in self._target_masks(state.target):
                image[mask] = color

        points, _ = forward_kinematics(state.joint_angles, self.cfg.link_lengths)
        arm = np.zeros((size, size), dtype=bool)
        for p, q in zip(points[:-1], points[1:]):
            arm |= self._segment(p, q, LINK_WIDTH)
        image[arm] = self.cfg.arm_color

        return image


class ReachArena:
    """单线程环境实例，每个工作线程独占一个"""

    def __init__(self, cfg: EnvConfig, seed: Optional[int] = None):
        check_geometry(cfg)
        self.cfg = cfg
        self.renderer = Renderer(cfg)
        self._rng = np.random.default_rng(seed)
        self._low = np.array([r[0] for r in cfg.joint_ranges], dtype=np.float64)
        self._high = np.array([r[1] for r in cfg.joint_ranges], dtype=np.float64)
        self.state = EnvState(
            joint_angles=np.clip(np.zeros(cfg.n_links), self._low, self._high), target=None
        )
        self._done = True

    @property
    def n_joints(self) -> int:
        return self.cfg.n_links

    def with_thresholds(self, success_dist: float, success_deg: float) -> "ReachArena":
        """同一几何、不同成功阈值的新环境（用于训练后评估）"""
        return ReachArena(
            replace(self.cfg, success_dist=success_dist, success_deg=success_deg)
        )

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        rng = np.random.default_rng(seed) if seed is not None else self._rng

        spec = TARGETS[TARGET_KINDS[int(rng.integers(len(TARGET_KINDS)))]]
        x_min, x_max, y_min, y_max = self.cfg.workspace
        position = np.array([rng.uniform(x_min, x_max), rng.uniform(y_min, y_max)])

        # 颜色在选定并摆放目标之后再随机
        options = spec.colors(self.cfg.dr_colors)
        color, color_name = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]

        angles = np.zeros(self.cfg.n_links)
        frac = self.cfg.init_range_fraction
        for j in range(min(2, self.cfg.n_links)):
            angles[j] = rng.uniform(frac * self._low[j], frac * self._high[j])
        angles = np.clip(angles, self._low, self._high)

        self.state = EnvState(
            joint_angles=angles,
            target=PlacedTarget(spec=spec, position=position, color=color, color_name=color_name),
            step_count=0,
        )
        self._done = False
        return self.render()

    def relative_pose(self) -> Tuple[float, float]:
        """末端与抓取点之间的距离（米）和朝向差（度）"""
        points, heading = forward_kinematics(self.state.joint_angles, self.cfg.link_lengths)
        target = self.state.target
        rel_dist = float(np.linalg.norm(points[-1] - target.grasp_point))
        rel_deg = wrap_degrees(heading, target.spec.grasp_orientation)
        return rel_dist, rel_deg

    def step(self, action_indices: Sequence[int]) -> StepOutcome:
        if self._done:
            raise RuntimeError("回合已结束，请先调用 reset()")
        if len(action_indices) != self.cfg.n_links:
            raise ValueError(
                f"需要 {self.cfg.n_links} 个关节动作，实际 {len(action_indices)} 个"
            )

        deltas = np.array([action_decode(i, self.cfg.mpi) for i in action_indices])
        self.state.joint_angles = np.clip(
            self.state.joint_angles + deltas, self._low, self._high
        )
        self.state.step_count += 1

        rel_dist, rel_deg = self.relative_pose()
        reward, success = reach_reward(
            rel_dist, rel_deg, self.cfg.success_dist, self.cfg.success_deg
        )
        done = success or self.state.step_count >= self.cfg.max_steps
        self._done = done

        return StepOutcome(
            observation=self.render(),
            reward=reward,
            done=done,
            info={"rel_dist": rel_dist, "rel_deg": rel_deg, "success": success},
        )

    def render(self) -> np.ndarray:
        return self.renderer.render(self.state)


def perceived_entities(cfg: EnvConfig, mode: str) -> List[str]:
    """Γ 的输入实体：partial 只有物体类型，full 还包括每个物体可能的颜色"""
    if mode == "none":
        return []
    entities = list(TARGET_KINDS)
    if mode == "full":
        for kind in TARGET_KINDS:
            entities.extend(name for _, name in TARGETS[kind].colors(cfg.dr_colors))
    return entities


class TraceWriter:
    """逐步轨迹 CSV：episode, step, 关节角, 动作, reward, rel_dist, rel_deg, done, success"""

    def __init__(self, file_path: str, n_joints: int):
        self.n_joints = n_joints
        self._file = open(file_path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        self._writer.writerow(self.columns(n_joints))

    @staticmethod
    def columns(n_joints: int) -> List[str]:
        return (
            ["episode", "step"]
            + [f"joint_{j}" for j in range(n_joints)]
            + [f"action_{j}" for j in range(n_joints)]
            + ["reward", "rel_dist", "rel_deg", "done", "success"]
        )

    def write_step(
        self, episode: int, state: EnvState, actions: Sequence[int], outcome: StepOutcome
    ):
        self._writer.writerow(
            [episode, state.step_count]
            + [f"{a:.6f}" for a in state.joint_angles]
            + [int(a) for a in actions]
            + [
                f"{outcome.reward:.6f}",
                f"{outcome.info['rel_dist']:.6f}",
                f"{outcome.info['rel_deg']:.4f}",
                int(outcome.done),
                int(outcome.info["success"]),
            ]
        )

    def close(self):
        if not self._file.closed:
            self._file.close()
            rl_logger.debug(f"轨迹文件已写入: {self._file.name}")

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc):
        self.close()
