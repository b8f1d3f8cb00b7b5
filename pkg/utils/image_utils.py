import os
from typing import List, Sequence
import numpy as np
from utils.logger import rl_logger


class ImageProcessor:
    """观测图像工具类：像素转换与 PPM 帧输出"""

    def __init__(self, separator_width: int = 2, separator_value: float = 1.0):
        self.separator_width = separator_width
        self.separator_value = separator_value

    @staticmethod
    def to_uint8(image: np.ndarray) -> np.ndarray:
        """[0,1] 浮点图像转换为 8 位像素"""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"需要 H×W×3 图像，实际形状 {image.shape}")
        return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)

    def save_ppm(self, image: np.ndarray, file_path: str) -> str:
        """保存为二进制 PPM (P6) 文件"""
        pixels = self.to_uint8(image)
        height, width, _ = pixels.shape

        directory = os.path.dirname(file_path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        with open(file_path, "wb") as f:
            f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())

        rl_logger.debug(f"保存图像帧: {file_path}")
        return file_path

    @staticmethod
    def load_ppm(file_path: str) -> np.ndarray:
        """读取 P6 文件，返回 [0,1] 浮点图像"""
        with open(file_path, "rb") as f:
            data = f.read()

        tokens: List[bytes] = []
        pos = 0
        while len(tokens) < 4:
            while data[pos : pos + 1].isspace():
                pos += 1
            start = pos
            while not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
        pos += 1

        if tokens[0] != b"P6" or tokens[3] != b"255":
            raise ValueError(f"不支持的 PPM 文件: {file_path}")
        width, height = int(tokens[1]), int(tokens[2])
        pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
        return pixels.reshape(height, width, 3).astype(np.float64) / 255.0

    def make_strip(self, frames: Sequence[np.ndarray]) -> np.ndarray:
        """把多帧图像横向拼接成一条，帧之间加分隔线"""
        if not frames:
            raise ValueError("没有可拼接的图像帧")
        height = frames[0].shape[0]
        separator = np.full(
            (height, self.separator_width, 3), self.separator_value, dtype=np.float64
        )

        parts = []
        for i, frame in enumerate(frames):
            if i > 0:
                parts.append(separator)
            parts.append(np.asarray(frame, dtype=np.float64))
        return np.concatenate(parts, axis=1)

    @staticmethod
    def color_pixel_count(image: np.ndarray, color: Sequence[float], tol: float = 1e-6) -> int:
        """统计与给定颜色一致的像素数"""
        diff = np.abs(image - np.asarray(color, dtype=image.dtype)[None, None, :])
        return int(np.all(diff <= tol, axis=2).sum())
