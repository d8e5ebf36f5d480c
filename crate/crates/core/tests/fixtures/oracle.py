"""Independent reference computations for the frozen fixtures in this directory.

Run: python3 oracle.py  (rewrites canonical_golden.json and chain100.json)
"""
import hashlib
import json
import os

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives import serialization

HERE = os.path.dirname(os.path.abspath(__file__))


def canon(v):
    return json.dumps(v, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha(b):
    return hashlib.sha256(b).hexdigest()


def signed(record, key):
    body = {k: v for k, v in record.items() if k != "signature"}
    record["signature"] = key.sign(canon(body)).hex()
    return record


def chain(seed, name, created_at, n):
    key = Ed25519PrivateKey.from_private_bytes(seed)
    pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    stream_id = sha(pub + b"\x1f" + name.encode())
    genesis = signed({
        "created_at": created_at,
        "owner": pub.hex(),
        "prev_hash": "00" * 32,
        "seq": 0,
        "stream_id": stream_id,
        "stream_kind": "CONTENT",
        "stream_name": name,
        "writers": [pub.hex()],
    }, key)
    lines = [canon(genesis)]
    prev = sha(lines[0])
    for i in range(1, n + 1):
        payload = f"post {i}".encode()
        e = signed({
            "author": pub.hex(),
            "content_hash": sha(payload),
            "payload_kind": "POST",
            "prev_hash": prev,
            "seq": i,
            "stream_id": stream_id,
            "timestamp": created_at + i,
        }, key)
        line = canon(e)
        lines.append(line)
        prev = sha(line)
    return {
        "created_at": created_at,
        "csl_sha256": sha(b"".join(l + b"\n" for l in lines)),
        "entries": n,
        "genesis_hash": sha(lines[0]),
        "head_hash": prev,
        "name": name,
        "seed_hex": seed.hex(),
        "stream_id": stream_id,
    }


CANON_CASES = [
    '{"b":1,"a":2}',
    '{"z":{"y":[3,2,1],"x":null},"a":true,"m":false}',
    '{"text":"café ☃ 😀","n":-42,"big":18446744073709551615}',
    '{"ctrl":"tab\\there\\nnl \\u0001 \\u001f","quote":"\\"q\\" back\\\\slash /"}',
    '{"nested":[{"b":[],"a":{}},{"é":1,"e":2,"E":3}]}',
    '{"keys":{"aa":1,"a":2,"ab":3,"b":4,"A":5,"_":6,"~":7}}',
    '{"del":"\u007f","zero":0,"neg0":-0}',
    '[1,"two",{"3":3,"10":10,"2":2}]',
]


def main():
    golden = [{"input": c, "canonical": canon(json.loads(c)).decode("utf-8")} for c in CANON_CASES]
    with open(os.path.join(HERE, "canonical_golden.json"), "w", encoding="utf-8") as f:
        json.dump(golden, f, ensure_ascii=False, indent=1)
        f.write("\n")
    with open(os.path.join(HERE, "chain100.json"), "w") as f:
        json.dump(chain(bytes([7] * 32), "oracle", 1700000000, 100), f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
