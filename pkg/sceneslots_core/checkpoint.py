# sceneslots_core/checkpoint.py
# 检查点二进制格式：参数、优化器矩、判别器与特征提取器权重、步数与随机数状态

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"UORF"
FORMAT_VERSION = 1

# 条目名前缀
PARAM_PREFIX = "param/"
OPTIM_PREFIX = "optim/"
DISC_PREFIX = "disc/"
EXTRACTOR_PREFIX = "extractor/"

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """检查点文件损坏（魔数/版本/长度/CRC）或配置摘要不匹配。"""


@dataclass
class Checkpoint:
    """
    digest: [Model] 配置摘要；metadata: 步数、阶段、种子等可 JSON 序列化的信息；
    entries: 名称 -> 数组，名称带前缀 param/、optim/、disc/、extractor/。
    """
    digest: str
    metadata: Dict[str, Any] = field(default_factory=dict)
    entries: Dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in self.entries.items() if name.startswith(prefix)}

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.group(PARAM_PREFIX)

    def add_group(self, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            self.entries[prefix + name] = np.asarray(value)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))


def _encode(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    digest = checkpoint.digest.encode("ascii")
    parts.append(struct.pack("<H", len(digest)) + digest)
    meta = json.dumps(checkpoint.metadata, sort_keys=True, ensure_ascii=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(checkpoint.entries)))
    for name in sorted(checkpoint.entries):
        array = np.asarray(checkpoint.entries[name])
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"条目 '{name}' 的数据类型 {array.dtype} 不受支持，只能保存 float32/float64")
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<B", _DTYPE_CODES[dtype]))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"检查点 {self.source} 被截断：需要 {n} 字节，偏移 {self.offset}，文件长度 {len(self.data)}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(data: bytes, source: str) -> Checkpoint:
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"检查点 {source} 过短 ({len(data)} 字节)")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"检查点 {source} 魔数错误: {data[:len(MAGIC)]!r}")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise CheckpointError(f"检查点 {source} CRC 校验失败: 存储 {stored_crc:#010x}，实际 {actual_crc:#010x}")

    reader = _Reader(body, source)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"检查点 {source} 格式版本 {version} 不受支持（当前 {FORMAT_VERSION}）")
    (digest_len,) = reader.unpack("<H")
    digest = reader.take(digest_len).decode("ascii")
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点 {source} 元数据无法解析: {e}") from e
    (count,) = reader.unpack("<I")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        (code,) = reader.unpack("<B")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"检查点 {source} 条目 '{name}' 的数据类型编码 {code} 未知")
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        entries[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
    if reader.offset != len(body):
        raise CheckpointError(f"检查点 {source} 末尾有 {len(body) - reader.offset} 字节多余数据")
    return Checkpoint(digest=digest, metadata=metadata, entries=entries)


def checkpoint_save(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """先写临时文件再原子替换，写到一半中断不会留下损坏的检查点。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(checkpoint)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        tmp_path.write_bytes(data)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"写入检查点 {path} 失败: {e}")
        raise
    logger.info(f"检查点已保存: {path} (step={checkpoint.step}, {len(checkpoint.entries)} 个条目, {len(data)} 字节)")
    return path


def read_checkpoint(path: Union[str, Path], expected_digest: Optional[str] = None, force: bool = False) -> Checkpoint:
    """
    读取检查点。expected_digest 给出且与文件中的摘要不同时拒绝载入，
    除非 force=True（此时只记录警告）。
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"检查点文件不存在: {path}")
    checkpoint = _decode(path.read_bytes(), str(path))
    if expected_digest is not None and checkpoint.digest != expected_digest:
        message = f"检查点 {path} 的配置摘要 {checkpoint.digest} 与当前配置摘要 {expected_digest} 不一致"
        if not force:
            raise CheckpointError(message + "；如确需载入请使用 force")
        logger.warning(message + "，已强制载入")
    logger.info(f"检查点已载入: {path} (step={checkpoint.step})")
    return checkpoint

