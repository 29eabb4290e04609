from __future__ import annotations

import struct
import torch
import numpy as np
import safetensors
import safetensors.torch

from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Optional

from .log_util import logger
from .file_util import atomic_open
from .dtype_util import TRAINING_DTYPE, get_numpy_dtype
from .error_util import CheckpointError
from .objective_util import MODES, ObjectiveId, check_mode
from .probe_util import LinearProbeParams, OrthogonalProbeParams, ProbeParams

__all__ = [
    "OPCKP_MAGIC",
    "ProbeCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "load_metadata",
    "write_opckp",
    "read_opckp",
    "get_extension_for_mode",
]

OPCKP_MAGIC = b"OPCKP\x00"
OPCKP_VERSION = 1
HEADER = struct.Struct("<BBII")
TAG = struct.Struct("<B")

@dataclass(frozen=True, eq=False)
class ProbeCheckpoint:
    """
    Probe parameters together with the training mode that produced them.
    """
    params: ProbeParams
    mode: str
    metadata: Dict[str, str] = field(default_factory=dict)

def get_extension_for_mode(mode: str, safetensors_format: bool=False) -> str:
    """
    >>> get_extension_for_mode("II")
    '.linear.opckp'
    >>> get_extension_for_mode("E", safetensors_format=True)
    '.safetensors'
    """
    if safetensors_format:
        return ".safetensors"
    return ".linear.opckp" if check_mode(mode) == "II" else ".opckp"

def _check_params_for_mode(params: ProbeParams, mode: str) -> None:
    if mode == "II" and not isinstance(params, LinearProbeParams):
        raise CheckpointError("Mode II checkpoints hold linear probe parameters")
    if mode != "II" and not isinstance(params, OrthogonalProbeParams):
        raise CheckpointError(f"Mode {mode} checkpoints hold orthogonal probe parameters")

def write_opckp(params: ProbeParams, mode: str, stream: BinaryIO) -> None:
    """
    Writes the binary checkpoint: magic, u8 version, u8 mode tag, u32 dim,
    u32 objective count, then either V (float64, row-major) followed by
    (u8 objective tag, d̄) records, or (u8 objective tag, B) records for
    linear probes.
    """
    mode = check_mode(mode)
    _check_params_for_mode(params, mode)
    dtype = get_numpy_dtype(TRAINING_DTYPE)

    def write_tensor(tensor: torch.Tensor) -> None:
        stream.write(np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=dtype).tobytes())

    objectives = params.objectives
    stream.write(OPCKP_MAGIC)
    stream.write(HEADER.pack(OPCKP_VERSION, MODES.index(mode), params.dim, len(objectives)))
    if isinstance(params, OrthogonalProbeParams):
        write_tensor(params.rotation)
        for objective in objectives:
            stream.write(TAG.pack(objective.tag))
            write_tensor(params.scalers[objective])
    else:
        for objective in objectives:
            stream.write(TAG.pack(objective.tag))
            write_tensor(params.maps[objective])

def read_opckp(stream: BinaryIO) -> ProbeCheckpoint:
    """
    Reads a binary checkpoint written by `write_opckp`.

    :raises CheckpointError: On bad magic, version, mode tag or truncation.
    """
    dtype = get_numpy_dtype(TRAINING_DTYPE)

    def read_exact(size: int, what: str) -> bytes:
        data = stream.read(size)
        if len(data) != size:
            raise CheckpointError(f"Truncated checkpoint while reading {what}")
        return data

    def read_tensor(*shape: int) -> torch.Tensor:
        count = int(np.prod(shape))
        values = np.frombuffer(read_exact(count * dtype.itemsize, "tensor data"), dtype=dtype)
        return torch.from_numpy(values.copy()).reshape(*shape)

    def read_objective() -> ObjectiveId:
        (tag,) = TAG.unpack(read_exact(TAG.size, "objective tag"))
        try:
            return ObjectiveId.from_tag(tag)
        except ValueError as e:
            raise CheckpointError(str(e)) from None

    if read_exact(len(OPCKP_MAGIC), "magic") != OPCKP_MAGIC:
        raise CheckpointError("Not an ortho-probe checkpoint (bad magic)")
    version, mode_tag, dim, count = HEADER.unpack(read_exact(HEADER.size, "header"))
    if version != OPCKP_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    if mode_tag >= len(MODES):
        raise CheckpointError(f"Unknown mode tag {mode_tag}")
    mode = MODES[mode_tag]

    params: ProbeParams
    if mode == "II":
        maps = {}
        for _ in range(count):
            objective = read_objective()
            maps[objective] = read_tensor(dim, dim)
        params = LinearProbeParams(maps=maps)
    else:
        rotation = read_tensor(dim, dim)
        scalers = {}
        for _ in range(count):
            objective = read_objective()
            scalers[objective] = read_tensor(dim)
        params = OrthogonalProbeParams(rotation=rotation, scalers=scalers, rotation_frozen=mode == "I")
    return ProbeCheckpoint(params=params, mode=mode)

def save_checkpoint(
    params: ProbeParams,
    path: str,
    mode: str,
    metadata: Optional[Dict[str, str]]=None
) -> None:
    """
    Saves a probe checkpoint atomically; the format follows the extension
    (`.safetensors`, otherwise the binary OPCKP format).
    """
    mode = check_mode(mode)
    _check_params_for_mode(params, mode)
    with atomic_open(path, binary=True) as f:
        if path.endswith(".safetensors"):
            combined_metadata = dict(metadata or {})
            combined_metadata["mode"] = mode
            combined_metadata["objectives"] = ",".join(objective.name for objective in params.objectives)
            state_dict = {key: value.contiguous() for key, value in params.state_dict().items()}
            f.write(safetensors.torch.save(state_dict, metadata=combined_metadata))
        else:
            write_opckp(params, mode, f)
    logger.info(f"Wrote mode {mode} checkpoint to {path}")

def load_metadata(input_file: str) -> Dict[str, str]:
    """
    Loads the metadata from a safetensors file.

    :param input_file: The path to the safetensors file.
    :return: The metadata as a dictionary, empty for other formats.
    """
    if not input_file.endswith(".safetensors"):
        return {}

    with safetensors.safe_open(input_file, framework="pt") as f: # type: ignore[no-untyped-call]
        metadata = f.metadata()

    if not isinstance(metadata, dict):
        return {}

    return metadata

def load_checkpoint(input_file: str) -> ProbeCheckpoint:
    """
    Loads a probe checkpoint from a file.

    :raises CheckpointError: When the file cannot be decoded.
    """
    if input_file.endswith(".safetensors"):
        metadata = load_metadata(input_file)
        if "mode" not in metadata:
            raise CheckpointError(f"{input_file} has no `mode` metadata")
        mode = check_mode(metadata["mode"])
        state_dict = {}
        with safetensors.safe_open(input_file, framework="pt") as f: # type: ignore[no-untyped-call]
            for key in f.keys():
                state_dict[key] = f.get_tensor(key)
        params: ProbeParams
        if mode == "II":
            params = LinearProbeParams.from_state_dict(state_dict)
        else:
            params = OrthogonalProbeParams.from_state_dict(state_dict, rotation_frozen=mode == "I")
        return ProbeCheckpoint(params=params, mode=mode, metadata=metadata)

    with open(input_file, "rb") as f:
        checkpoint = read_opckp(f)
    logger.debug(f"Loaded mode {checkpoint.mode} checkpoint from {input_file}")
    return checkpoint
