"""RaZeR: FP4/FP3 quantization with a remapped negative-zero special value."""
from .codec import (
    ContainerError,
    Fp3Planes,
    PackedFp4Block,
    effective_bits,
    pack_fp3,
    pack_fp4,
    read_container,
    unpack_fp3,
    unpack_fp4,
    write_container,
)
from .fastcast import batch_cast, encode_half_to_razer4, razer4_to_half_fast, razer4_to_half_lookup
from .kernels import KVCacheState, QuantizedMatrix, gemv_fused, gemv_reference, kv_append, kv_attention
from .numerics import DatatypeSpec, fp3_grid, fp4_grid, half_decode, half_encode, int_grid, nearest_grid_value
from .quantizer import QuantConfig, QuantizedTensor, dequantize_tensor, quantize_tensor
from .svsearch import SVSet, calibrate_model, cluster_svsets, round_svset, search_layer_svset, sweep_sv_error

__version__ = "0.1.0"
