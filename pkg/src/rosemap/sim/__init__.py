from .rosette import RosetteSpec, generate_rosette, rosette_path_length
from .scene import generate_ground_truth_scene
from .sensors import NoiseSpec, SensorLog, SensorRates, Simulator, synthesize_sensors

__all__ = [
    "RosetteSpec",
    "generate_rosette",
    "rosette_path_length",
    "generate_ground_truth_scene",
    "NoiseSpec",
    "SensorLog",
    "SensorRates",
    "Simulator",
    "synthesize_sensors",
]
