import math
import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional
import yaml


class ConfigError(ValueError):
    """配置错误，消息中包含出错的配置项名称"""


# 环境预设：3连杆桌面臂（20×25 cm 工作区）和 4 连杆宽工作区（60×20 cm）
ENV_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk3": {
        "n_links": 3,
        "link_lengths": [0.26, 0.22, 0.06],
        "joint_ranges": [[-math.pi, math.pi]] * 3,
        "workspace": [0.14, 0.34, -0.125, 0.125],
    },
    "desk4_wide": {
        "n_links": 4,
        "link_lengths": [0.30, 0.25, 0.10, 0.05],
        "joint_ranges": [[-math.pi, math.pi]] * 4,
        "workspace": [-0.30, 0.30, 0.25, 0.45],
    },
}

KGE_MODES = ("none", "partial", "full")


@dataclass
class EnvConfig:
    """环境配置（平面多连杆臂）"""

    preset: str = "desk3"
    n_links: int = 3
    link_lengths: List[float] = field(default_factory=lambda: [0.26, 0.22, 0.06])
    joint_ranges: List[List[float]] = field(
        default_factory=lambda: [[-math.pi, math.pi]] * 3
    )
    mpi: float = 0.15  # 最大关节增量（弧度）
    workspace: List[float] = field(
        default_factory=lambda: [0.14, 0.34, -0.125, 0.125]
    )  # x_min, x_max, y_min, y_max（米）
    image_size: int = 64
    dr_colors: bool = False
    arm_color: List[float] = field(default_factory=lambda: [0.95, 0.95, 0.95])
    success_dist: float = 0.05
    success_deg: float = 15.0
    max_steps: int = 50
    init_range_fraction: float = 0.15


@dataclass
class AgentConfig:
    """智能体网络结构配置"""

    n_joints: int = 3
    actions_per_joint: int = 7
    kge_dim: int = 0
    image_size: int = 64
    conv1_channels: int = 32
    conv1_kernel: int = 3
    conv1_stride: int = 4
    conv2_channels: int = 32
    conv2_kernel: int = 5
    conv2_stride: int = 2
    fc_size: int = 128
    lstm_hidden: int = 128

    @property
    def conv1_out(self) -> int:
        return (self.image_size - self.conv1_kernel) // self.conv1_stride + 1

    @property
    def conv2_out(self) -> int:
        return (self.conv1_out - self.conv2_kernel) // self.conv2_stride + 1

    @property
    def flat_size(self) -> int:
        """卷积输出展平后的长度（64×64 输入时为 1152）"""
        return self.conv2_out * self.conv2_out * self.conv2_channels

    @property
    def lstm_input_width(self) -> int:
        return self.fc_size + self.kge_dim


@dataclass
class TrainConfig:
    """A3C 训练配置"""

    gamma: float = 0.99
    gae_lambda: float = 1.0
    entropy_beta: float = 0.01
    lr: float = 1e-4
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    n_workers: int = 17
    total_steps: int = 500_000
    rollout_length: int = 20
    interim_interval: int = 50_000
    interim_episodes: int = 40
    grad_clip_norm: float = 40.0
    hogwild: bool = False
    precision: str = "float32"


@dataclass
class KGEConfig:
    """知识图谱嵌入配置"""

    mode: str = "none"  # none, partial, full
    graph_path: str = "data/scene_graph.tsv"
    word_vectors_path: str = ""  # 为空时使用确定性的备用词向量
    fallback_seed: int = 0
    target_dim: int = 0  # 0 表示按模式自动决定（150 / 300）
    word_dim: int = 40
    dynamic: bool = False


@dataclass
class EvalConfig:
    """训练后评估配置"""

    episodes: int = 1000
    dist_threshold: float = 0.10
    deg_threshold: float = 17.0
    seed: int = 12345
    greedy: bool = False
    anova_runs: int = 30
    anova_episodes: int = 100
    histogram_bins: int = 20


@dataclass
class SystemConfig:
    """系统配置"""

    log_dir: str = "logs"
    log_level: str = "INFO"


SECTIONS = {
    "env": EnvConfig,
    "agent": AgentConfig,
    "train": TrainConfig,
    "kge": KGEConfig,
    "eval": EvalConfig,
    "system": SystemConfig,
}


def _coerce(section: str, key: str, current: Any, value: Any) -> Any:
    """按默认值的类型检查并转换配置值"""
    name = f"{section}.{key}"
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: 需要布尔值，实际为 {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: 需要整数，实际为 {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # PyYAML 把 1e-4 这类写法解析为字符串
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{name}: 需要实数，实际为 {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: 需要实数，实际为 {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: 需要字符串，实际为 {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: 需要列表，实际为 {value!r}")
        return value
    return value


class ExperimentConfig:
    """统一实验配置管理类"""

    def __init__(self, config_file: Optional[str] = None):
        self.seed = 0
        self.output_dir = "runs/default"
        self.env = EnvConfig()
        self.agent = AgentConfig()
        self.train = TrainConfig()
        self.kge = KGEConfig()
        self.eval = EvalConfig()
        self.system = SystemConfig()

        if config_file:
            self.load_from_file(config_file)
        else:
            self.validate()

    def load_from_file(self, config_file: str):
        """从YAML文件加载配置，未知的配置项直接拒绝"""
        if not os.path.exists(config_file):
            raise ConfigError(f"config: 配置文件不存在: {config_file}")

        with open(config_file, "r", encoding="utf-8") as f:
            try:
                config_data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"config: YAML解析失败: {e}") from e

        if not isinstance(config_data, dict):
            raise ConfigError("config: 顶层必须是映射")

        self.apply_dict(config_data)

    def apply_dict(self, config_data: Dict[str, Any]):
        """应用配置字典（先应用环境预设，再覆盖显式配置项）"""
        for key, value in config_data.items():
            if key in ("seed", "output_dir"):
                continue
            if key not in SECTIONS:
                raise ConfigError(f"{key}: 未知的配置项")
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: 配置段必须是映射")

        if "seed" in config_data:
            self.seed = _coerce("", "seed", 0, config_data["seed"])
        if "output_dir" in config_data:
            self.output_dir = _coerce("", "output_dir", "", config_data["output_dir"])

        env_data = dict(config_data.get("env", {}))
        preset = env_data.get("preset", self.env.preset)
        if preset not in ENV_PRESETS:
            raise ConfigError(f"env.preset: 未知的环境预设 {preset!r}")
        for key, value in ENV_PRESETS[preset].items():
            setattr(self.env, key, value)
        self.env.preset = preset
        if "n_links" in env_data and "joint_ranges" not in env_data:
            env_data["joint_ranges"] = [[-math.pi, math.pi]] * env_data["n_links"]

        for section, cls in SECTIONS.items():
            data = env_data if section == "env" else config_data.get(section, {})
            target = getattr(self, section)
            known = {f.name for f in fields(cls)}
            for key, value in data.items():
                if key not in known:
                    raise ConfigError(f"{section}.{key}: 未知的配置项")
                setattr(target, key, _coerce(section, key, getattr(target, key), value))

        explicit_agent = config_data.get("agent", {})
        self.resolve(explicit_agent)
        self.validate()

        from modules.reach_arena import check_geometry

        check_geometry(self.env, error_cls=ConfigError)

    def resolve(self, explicit_agent: Optional[Dict[str, Any]] = None):
        """推导跨配置段的派生字段"""
        explicit_agent = explicit_agent or {}

        if self.kge.mode == "none" and self.kge.target_dim != 0:
            raise ConfigError(
                f"kge.target_dim: 模式为 none 时不能设置嵌入维度（{self.kge.target_dim}）"
            )
        if self.kge.mode in ("partial", "full") and self.kge.target_dim == 0:
            full_dr = self.kge.mode == "full" and self.env.dr_colors
            self.kge.target_dim = 300 if full_dr else 150

        kge_dim = 0 if self.kge.mode == "none" else self.kge.target_dim
        if "kge_dim" in explicit_agent and explicit_agent["kge_dim"] != kge_dim:
            raise ConfigError(
                f"agent.kge_dim: 与 kge 配置推导出的维度 {kge_dim} 不一致"
            )
        self.agent.kge_dim = kge_dim

        if "n_joints" in explicit_agent and explicit_agent["n_joints"] != self.env.n_links:
            raise ConfigError("agent.n_joints: 必须等于 env.n_links")
        self.agent.n_joints = self.env.n_links

        if "image_size" in explicit_agent and explicit_agent["image_size"] != self.env.image_size:
            raise ConfigError("agent.image_size: 必须等于 env.image_size")
        self.agent.image_size = self.env.image_size

    def validate(self):
        """校验配置不变量"""
        env, agent, train, kge = self.env, self.agent, self.train, self.kge

        if kge.mode not in KGE_MODES:
            raise ConfigError(f"kge.mode: 必须是 {KGE_MODES} 之一，实际为 {kge.mode!r}")
        if kge.mode == "none" and kge.target_dim != 0:
            raise ConfigError("kge.target_dim: 模式为 none 时不能设置嵌入维度")
        if kge.mode != "none" and kge.target_dim <= 0:
            raise ConfigError("kge.target_dim: 必须为正整数")
        if kge.word_dim <= 0:
            raise ConfigError("kge.word_dim: 必须为正整数")

        if env.n_links < 2:
            raise ConfigError("env.n_links: 至少需要 2 个连杆")
        if len(env.link_lengths) != env.n_links:
            raise ConfigError("env.link_lengths: 长度必须等于 env.n_links")
        if any(l <= 0 for l in env.link_lengths):
            raise ConfigError("env.link_lengths: 连杆长度必须为正")
        if len(env.joint_ranges) != env.n_links:
            raise ConfigError("env.joint_ranges: 长度必须等于 env.n_links")
        for low_high in env.joint_ranges:
            if len(low_high) != 2 or not low_high[0] < low_high[1]:
                raise ConfigError("env.joint_ranges: 每个关节需满足 WRLL < WRUL")
        if env.mpi <= 0:
            raise ConfigError("env.mpi: 必须大于 0")
        if len(env.workspace) != 4:
            raise ConfigError("env.workspace: 需要 [x_min, x_max, y_min, y_max]")
        x_min, x_max, y_min, y_max = env.workspace
        if not (x_min < x_max and y_min < y_max):
            raise ConfigError("env.workspace: 区间上下限顺序错误")
        if env.image_size <= 0:
            raise ConfigError("env.image_size: 必须为正整数")
        if len(env.arm_color) != 3 or any(not 0.0 <= c <= 1.0 for c in env.arm_color):
            raise ConfigError("env.arm_color: 需要 [0,1] 内的 RGB 三元组")
        if env.success_dist <= 0 or env.success_deg <= 0:
            raise ConfigError("env.success_dist: 成功阈值必须为正")
        if env.max_steps <= 0:
            raise ConfigError("env.max_steps: 必须为正整数")

        if not 0.0 < train.gamma <= 1.0:
            raise ConfigError("train.gamma: 必须在 (0,1] 内")
        if not 0.0 < train.gae_lambda <= 1.0:
            raise ConfigError("train.gae_lambda: 必须在 (0,1] 内")
        if train.entropy_beta < 0:
            raise ConfigError("train.entropy_beta: 不能为负")
        if train.lr <= 0:
            raise ConfigError("train.lr: 必须为正")
        if not 0.0 < train.rmsprop_decay < 1.0:
            raise ConfigError("train.rmsprop_decay: 必须在 (0,1) 内")
        if train.rmsprop_eps <= 0:
            raise ConfigError("train.rmsprop_eps: 必须为正")
        if train.n_workers < 1:
            raise ConfigError("train.n_workers: 至少需要 1 个工作线程")
        if train.total_steps < 1 or train.rollout_length < 1:
            raise ConfigError("train.total_steps: 步数必须为正")
        if train.interim_interval < 1 or train.interim_episodes < 1:
            raise ConfigError("train.interim_interval: 必须为正")
        if train.grad_clip_norm <= 0:
            raise ConfigError("train.grad_clip_norm: 必须为正")
        if train.precision not in ("float32", "float64"):
            raise ConfigError("train.precision: 只支持 float32 或 float64")

        if agent.actions_per_joint != 7:
            raise ConfigError("agent.actions_per_joint: 动作集固定为 7 个动作")
        if agent.conv1_out < agent.conv2_kernel or agent.image_size < agent.conv1_kernel:
            raise ConfigError("agent.conv2_kernel: 卷积核大于输入尺寸")

        if self.eval.episodes < 1 or self.eval.anova_runs < 2 or self.eval.anova_episodes < 1:
            raise ConfigError("eval.episodes: 评估回合数配置无效")

    def to_dict(self) -> Dict[str, Any]:
        config_data: Dict[str, Any] = {"seed": self.seed, "output_dir": self.output_dir}
        for section in SECTIONS:
            config_data[section] = asdict(getattr(self, section))
        return config_data

    def save_to_file(self, config_file: str):
        """保存配置到YAML文件"""
        directory = os.path.dirname(config_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(config_file, "w", encoding="utf-8") as f:
            yaml.safe_dump(
                self.to_dict(), f, default_flow_style=False, allow_unicode=True
            )

    @classmethod
    def from_snapshot(cls, config_file: str) -> "ExperimentConfig":
        """读取运行目录中保存的配置快照"""
        return cls(config_file)


# 全局默认配置实例
config = ExperimentConfig()
