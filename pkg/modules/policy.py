import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union
import numpy as np
import torch
import torch.nn as nn
from config.config import AgentConfig
from modules.autodiff import (
    LSTMWeights,
    concat,
    conv2d,
    fully_connected,
    lstm_cell,
    orthogonal_init,
    orthogonal_kernel,
    relu,
    softmax,
)
from modules.kge import SceneEmbedding

RELU_GAIN = math.sqrt(2.0)
ACTOR_GAIN = 0.01


@dataclass
class RecurrentState:
    """LSTM 的隐藏状态与细胞状态，每个回合开始时清零"""

    h: torch.Tensor
    c: torch.Tensor

    def detach(self) -> "RecurrentState":
        return RecurrentState(self.h.detach(), self.c.detach())


@dataclass
class PolicyOutput:
    action_dists: List[torch.Tensor]  # 每个关节一个 7 维概率向量
    value: torch.Tensor  # V(s; θ)


class PolicyNetwork(nn.Module):
    """
    conv1 → ReLU → conv2 → ReLU → 展平 → FC → ReLU → 拼接 KGE → LSTM
    → n 个 softmax 动作头 + 价值头
    """

    def __init__(self, cfg: AgentConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if cfg.image_size < cfg.conv1_kernel or cfg.conv1_out < cfg.conv2_kernel:
            raise ValueError(f"图像尺寸 {cfg.image_size} 对当前卷积配置过小")
        if cfg.n_joints < 1:
            raise ValueError("n_joints 必须为正")
        self.cfg = cfg

        gen = torch.Generator().manual_seed(seed)
        hidden = cfg.lstm_hidden

        def param(tensor: torch.Tensor) -> nn.Parameter:
            return nn.Parameter(tensor)

        def zeros(n: int) -> nn.Parameter:
            return nn.Parameter(torch.zeros(n, dtype=dtype))

        self.conv1_w = param(
            orthogonal_kernel(cfg.conv1_kernel, 3, cfg.conv1_channels, RELU_GAIN, gen, dtype)
        )
        self.conv1_b = zeros(cfg.conv1_channels)
        self.conv2_w = param(
            orthogonal_kernel(
                cfg.conv2_kernel, cfg.conv1_channels, cfg.conv2_channels, RELU_GAIN, gen, dtype
            )
        )
        self.conv2_b = zeros(cfg.conv2_channels)
        self.fc_w = param(orthogonal_init(cfg.flat_size, cfg.fc_size, RELU_GAIN, gen, dtype))
        self.fc_b = zeros(cfg.fc_size)

        self.lstm_w_x = param(orthogonal_init(cfg.lstm_input_width, 4 * hidden, 1.0, gen, dtype))
        self.lstm_w_h = param(orthogonal_init(hidden, 4 * hidden, 1.0, gen, dtype))
        self.lstm_b = zeros(4 * hidden)

        self.actor_w = nn.ParameterList(
            [
                param(orthogonal_init(hidden, cfg.actions_per_joint, ACTOR_GAIN, gen, dtype))
                for _ in range(cfg.n_joints)
            ]
        )
        self.actor_b = nn.ParameterList([zeros(cfg.actions_per_joint) for _ in range(cfg.n_joints)])
        self.critic_w = param(orthogonal_init(hidden, 1, 1.0, gen, dtype))
        self.critic_b = zeros(1)

    @property
    def dtype(self) -> torch.dtype:
        return self.conv1_w.dtype

    @property
    def lstm_input_width(self) -> int:
        return self.lstm_w_x.shape[0]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def initial_state(self) -> RecurrentState:
        hidden = self.cfg.lstm_hidden
        return RecurrentState(
            torch.zeros(hidden, dtype=self.dtype), torch.zeros(hidden, dtype=self.dtype)
        )

    def _as_image(self, image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        image = torch.as_tensor(image, dtype=self.dtype)
        size = self.cfg.image_size
        if tuple(image.shape) != (size, size, 3):
            raise ValueError(f"图像形状需要 {(size, size, 3)}，实际 {tuple(image.shape)}")
        return image

    def _as_kge(
        self, kge: Optional[Union[SceneEmbedding, np.ndarray, torch.Tensor]]
    ) -> Optional[torch.Tensor]:
        kge_dim = self.cfg.kge_dim
        if kge is None:
            if kge_dim > 0:
                raise ValueError(f"网络需要 {kge_dim} 维场景嵌入")
            return None
        if kge_dim == 0:
            raise ValueError("基线网络不接受场景嵌入")
        if isinstance(kge, SceneEmbedding):
            kge = kge.values
        if not torch.is_tensor(kge):
            kge = np.asarray(kge)
        values = torch.as_tensor(kge, dtype=self.dtype)
        if tuple(values.shape) != (kge_dim,):
            raise ValueError(f"场景嵌入长度需要 {kge_dim}，实际 {tuple(values.shape)}")
        return values

    def encode(self, image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        """视觉特征：两层卷积 + 全连接"""
        x = self._as_image(image)
        x = relu(conv2d(x, self.conv1_w, self.conv1_b, self.cfg.conv1_stride))
        x = relu(conv2d(x, self.conv2_w, self.conv2_b, self.cfg.conv2_stride))
        return relu(fully_connected(x.reshape(-1), self.fc_w, self.fc_b))

    def forward(
        self,
        image: Union[np.ndarray, torch.Tensor],
        kge: Optional[Union[SceneEmbedding, np.ndarray, torch.Tensor]],
        state: RecurrentState,
    ) -> Tuple[PolicyOutput, RecurrentState]:
        features = self.encode(image)
        kge_values = self._as_kge(kge)
        if kge_values is not None:
            # KGE 在 LSTM 之前与视觉特征拼接
            features = concat([features, kge_values])

        h, c = lstm_cell(features, state.h, state.c, LSTMWeights(self.lstm_w_x, self.lstm_w_h, self.lstm_b))
        dists = [
            softmax(fully_connected(h, w, b)) for w, b in zip(self.actor_w, self.actor_b)
        ]
        value = fully_connected(h, self.critic_w, self.critic_b)[0]
        return PolicyOutput(action_dists=dists, value=value), RecurrentState(h, c)


def sample_actions(
    output: PolicyOutput, generator: Optional[torch.Generator] = None
) -> Tuple[List[int], torch.Tensor, torch.Tensor]:
    """每个动作头独立采样；log_prob 与熵对所有头求和"""
    indices: List[int] = []
    log_prob = torch.zeros((), dtype=output.value.dtype)
    entropy = torch.zeros((), dtype=output.value.dtype)
    for probs in output.action_dists:
        idx = int(torch.multinomial(probs.detach(), 1, generator=generator).item())
        indices.append(idx)
        log_prob = log_prob + torch.log(probs[idx])
        entropy = entropy - torch.special.xlogy(probs, probs).sum()
    return indices, log_prob, entropy


def greedy_actions(output: PolicyOutput) -> List[int]:
    """每个头取概率最大的动作，并列时取最小索引"""
    return [int(np.argmax(p.detach().cpu().numpy())) for p in output.action_dists]


def action_log_prob(output: PolicyOutput, indices: Sequence[int]) -> torch.Tensor:
    return sum(torch.log(p[i]) for p, i in zip(output.action_dists, indices))
