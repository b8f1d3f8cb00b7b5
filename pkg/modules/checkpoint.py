"""
模型检查点读写

文件格式：
    magic  b"KGA3C\\x01"（最后一个字节为格式版本）
    uint32 小端，JSON 头部长度
    JSON 头部：version, step, kge_dim, agent（AgentConfig 字段）, tensors（name/shape/offset）
    小端 float32 参数数据
"""

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple
import numpy as np
import torch
from config.config import AgentConfig
from modules.policy import PolicyNetwork
from utils.logger import rl_logger

MAGIC = b"KGA3C\x01"
FORMAT_VERSION = 1
LATEST_NAME = "latest.kga3c"

# 结构相关字段，加载时必须与目标配置一致
STRUCTURAL_FIELDS = (
    "kge_dim",
    "n_joints",
    "actions_per_joint",
    "image_size",
    "conv1_channels",
    "conv1_kernel",
    "conv1_stride",
    "conv2_channels",
    "conv2_kernel",
    "conv2_stride",
    "fc_size",
    "lstm_hidden",
)


class CheckpointError(RuntimeError):
    """检查点损坏、版本不符或与当前网络配置不匹配"""


@dataclass
class Checkpoint:
    step: int
    agent: AgentConfig
    tensors: Dict[str, np.ndarray]
    path: str = ""


def checkpoint_name(step: int) -> str:
    return f"step_{step:09d}.kga3c"


def save_checkpoint(model: PolicyNetwork, step: int, path: str) -> str:
    """写入临时文件后原子替换，中断时不会留下半个文件"""
    manifest = []
    blobs = []
    offset = 0
    for name, param in model.named_parameters():
        data = param.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(data).tobytes()
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "version": FORMAT_VERSION,
        "step": int(step),
        "kge_dim": model.cfg.kge_dim,
        "agent": asdict(model.cfg),
        "tensors": manifest,
        "data_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)

    rl_logger.debug(f"检查点已保存: {path} (step={step})")
    return path


def _check_agent(stored: AgentConfig, expected: AgentConfig, path: str):
    if stored.kge_dim != expected.kge_dim:
        raise CheckpointError(
            f"{path}: 检查点 kge_dim={stored.kge_dim}，当前配置 kge_dim={expected.kge_dim}"
        )
    for key in STRUCTURAL_FIELDS:
        if getattr(stored, key) != getattr(expected, key):
            raise CheckpointError(
                f"{path}: agent.{key} 不一致（检查点 {getattr(stored, key)}，"
                f"当前配置 {getattr(expected, key)}）"
            )


def load_checkpoint(path: str, expected: Optional[AgentConfig] = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"无法读取检查点 {path}: {e}") from e

    if len(blob) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: 文件被截断")
    if blob[: len(MAGIC) - 1] != MAGIC[:-1]:
        raise CheckpointError(f"{path}: 不是 KGA3C 检查点（magic 不符）")
    if blob[len(MAGIC) - 1] != MAGIC[-1]:
        raise CheckpointError(f"{path}: 不支持的格式版本 {blob[len(MAGIC) - 1]}")

    (header_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    data_start = header_start + header_len
    if len(blob) < data_start:
        raise CheckpointError(f"{path}: 头部被截断")
    try:
        header = json.loads(blob[header_start:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: 头部损坏: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: 不支持的头部版本 {header.get('version')}")

    try:
        agent = AgentConfig(**header["agent"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: agent 配置无效: {e}") from e
    if expected is not None:
        _check_agent(agent, expected, path)

    data = blob[data_start:]
    if len(data) != header.get("data_bytes", -1):
        raise CheckpointError(
            f"{path}: 数据长度 {len(data)} 与头部记录 {header.get('data_bytes')} 不符（文件被截断？）"
        )

    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: 张量 {entry['name']} 超出数据范围")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()

    return Checkpoint(step=int(header["step"]), agent=agent, tensors=tensors, path=path)


def load_into(model: PolicyNetwork, checkpoint: Checkpoint):
    """把检查点参数复制进已构建的网络"""
    _check_agent(checkpoint.agent, model.cfg, checkpoint.path)
    params = dict(model.named_parameters())
    if set(params) != set(checkpoint.tensors):
        raise CheckpointError(f"{checkpoint.path}: 参数名集合与网络不一致")
    with torch.no_grad():
        for name, param in params.items():
            values = checkpoint.tensors[name]
            if tuple(values.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{checkpoint.path}: 参数 {name} 形状 {values.shape} 与网络 {tuple(param.shape)} 不符"
                )
            param.copy_(torch.from_numpy(values).to(param.dtype))


def restore_model(
    path: str, expected: Optional[AgentConfig] = None, dtype: torch.dtype = torch.float32
) -> Tuple[PolicyNetwork, int]:
    checkpoint = load_checkpoint(path, expected)
    model = PolicyNetwork(checkpoint.agent, seed=0, dtype=dtype)
    load_into(model, checkpoint)
    rl_logger.info(f"已加载检查点 {path} (step={checkpoint.step})")
    return model, checkpoint.step
