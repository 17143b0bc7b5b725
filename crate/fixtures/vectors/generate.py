"""Writes the golden wire vectors with Python's struct module.

Run from this directory: python3 generate.py
"""
import struct

DT = {"f32": (1, "f"), "f64": (2, "d"), "i32": (3, "i"), "i64": (4, "q"), "u8": (5, "B")}


def tensor(dtype, shape, values):
    code, fmt = DT[dtype]
    out = struct.pack("<BB", code, len(shape))
    out += b"".join(struct.pack("<I", d) for d in shape)
    out += b"".join(struct.pack("<" + fmt, v) for v in values)
    return out


def frame(kind, payload):
    return struct.pack("<BQ", kind, len(payload)) + payload


def s(text):
    b = text.encode()
    return struct.pack("<I", len(b)) + b


VECTORS = {
    "tensor_f32_scalar": (tensor("f32", [], [1.0]), "TensorEncoding: F32 scalar 1.0, shape ()"),
    "tensor_f32_2x2": (tensor("f32", [2, 2], [1, 2, 3, 4]), "TensorEncoding: F32 2x2 [[1,2],[3,4]]"),
    "tensor_f64_3": (tensor("f64", [3], [0.5, -2.0, 1e-300]), "TensorEncoding: F64 [0.5, -2, 1e-300]"),
    "tensor_i32_2x1": (tensor("i32", [2, 1], [-7, 65536]), "TensorEncoding: I32 2x1 [[-7],[65536]]"),
    "tensor_i64_labels": (tensor("i64", [4], [0, 3, 1, 2]), "TensorEncoding: I64 labels [0,3,1,2]"),
    "tensor_u8_empty": (tensor("u8", [0, 5], []), "TensorEncoding: U8 empty tensor of shape (0,5)"),
    "frame_tensor_2x2": (frame(0x01, tensor("f32", [2, 2], [1, 2, 3, 4])), "TENSOR frame wrapping the F32 2x2 example, length 26"),
    "frame_hello_worker": (frame(0x02, struct.pack("<HHB", 1, 0, 1)), "HELLO major=1 minor=0 role=worker"),
    "frame_load_partition": (frame(0x03, struct.pack("<Q", 42) + b"EPST"), "LOAD_PARTITION seed=42, partition bytes 'EPST'"),
    "frame_fwd_req": (frame(0x04, struct.pack("<II", 3, 1) + tensor("f32", [1, 2], [0.25, -0.25])), "FWD_REQ batch=3 microbatch=1 activations F32 1x2 [0.25,-0.25]"),
    "frame_fwdbwd_req": (
        frame(0x05, struct.pack("<II", 0, 7) + tensor("f32", [1, 2], [0, 0]) + tensor("i64", [1], [0])),
        "FWDBWD_REQ batch=0 microbatch=7 activations F32 1x2 zeros, labels I64 [0]",
    ),
    "frame_grad_resp": (
        frame(0x06, struct.pack("<IIQ", 0, 7, 1500) + tensor("f32", [], [0.6931471824645996]) + tensor("f32", [1, 2], [-0.5, 0.5])),
        "GRAD_RESP batch=0 microbatch=7 compute_us=1500 loss F32 ln2 grad F32 1x2 [-0.5,0.5]",
    ),
    "frame_step": (frame(0x07, struct.pack("<d", 0.05)), "STEP lr=0.05"),
    "frame_fetch_weights": (frame(0x08, b""), "FETCH_WEIGHTS"),
    "frame_weights_resp": (
        frame(0x09, struct.pack("<I", 2) + struct.pack("<IB", 4, 0) + tensor("f32", [1, 1], [2.0]) + struct.pack("<IB", 4, 1) + tensor("f32", [1], [-1.0])),
        "WEIGHTS_RESP two entries: layer 4 slot 0 F32 [[2]], layer 4 slot 1 F32 [-1]",
    ),
    "frame_tool_begin": (frame(0x0A, struct.pack("<Q", 0) + s("vector_search") + struct.pack("<I", 3) + b"abc"), "TOOL_BEGIN ticket=0 name=vector_search args 'abc'"),
    "frame_tool_retrieve": (frame(0x0B, struct.pack("<Q", 2**64 - 1)), "TOOL_RETRIEVE timeout_ms=u64::MAX (wait forever)"),
    "frame_tool_result": (frame(0x0C, struct.pack("<QQQB", 9, 100, 250, 0) + struct.pack("<I", 2) + b"ok"), "TOOL_RESULT ticket=9 start_us=100 end_us=250 status=0 payload 'ok'"),
    "frame_thermal_report": (frame(0x0D, struct.pack("<dBd", 180.0, 1, 1.0)), "THERMAL_REPORT heat=180 state=1 (fair) throttle=1"),
    "frame_shutdown": (frame(0x0E, b""), "SHUTDOWN, empty payload"),
    "frame_error": (frame(0x0F, struct.pack("<H", 2) + b"no partition loaded"), "ERROR code=2 message 'no partition loaded'"),
}

if __name__ == "__main__":
    for name, (data, desc) in VECTORS.items():
        with open(name + ".bin", "wb") as f:
            f.write(data)
        with open(name + ".txt", "w") as f:
            f.write(desc + "\n" + data.hex(" ") + "\n")
