from .logger import setup_logger, rl_logger
from .image_utils import ImageProcessor

__all__ = ["setup_logger", "rl_logger", "ImageProcessor"]
