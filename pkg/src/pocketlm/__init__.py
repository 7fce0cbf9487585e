"""CPU-only quantized LLM inference: container format, block codecs,
transformer engine, sampling, chat templating, REST server, and CLI."""

from .container import ModelContainer, load_file, read_container, save_file, write_container
from .model import Model, Session, StopConditions, load_model
from .prompt import ChatMessage, OrcaMiniTemplate, RawTemplate, template_by_name
from .quant import DType, bits_per_weight, dequantize, estimate_model_bytes, quantize
from .sampler import SamplerParams
from .tokenizer import Vocabulary, decode, encode

__version__ = "0.1.0"

__all__ = [
    "ChatMessage",
    "DType",
    "Model",
    "ModelContainer",
    "OrcaMiniTemplate",
    "RawTemplate",
    "SamplerParams",
    "Session",
    "StopConditions",
    "Vocabulary",
    "bits_per_weight",
    "decode",
    "dequantize",
    "encode",
    "estimate_model_bytes",
    "load_file",
    "load_model",
    "quantize",
    "read_container",
    "save_file",
    "template_by_name",
    "write_container",
]
