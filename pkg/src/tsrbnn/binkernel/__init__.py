from .bitplane import BitPlane, n_words, pack, pack_bits, popcount, unpack, unpack_bits, xnor_dot
from .engine import CompileError, PackedModel, compile_model, packed_forward, plan
from .fold import GEQ, LEQ, CONST, ThresholdParams, Thresholds, fold_bn_sign
from .kernels import xnor_gemm, xnor_gemm_numpy

compile = compile_model  # noqa: A001
