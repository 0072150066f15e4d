#!/usr/bin/env python3
"""Independent reference for the AP hash and the chained message mapping.

Regenerates mapping.csv, variants.csv and ap_hash.csv. Kept separate from the Rust code so the golden
vectors are not produced by the implementation they check.
"""
import csv
import sys

M = 0xFFFFFFFF

FEATURES = ["DacAdc", "Fpu", "Pwm", "RtcFre", "RtcPha", "Sram"]
DEFAULT_RADICES = {
    "DacAdc": [256, 2, 2, 4],
    "Fpu": [2, 32, 32],
    "Pwm": [4, 8, 32, 2, 2],
    "RtcFre": [4, 8, 16, 8],
    "RtcPha": [4, 8, 128],
    "Sram": [1024],
}


def ap_hash(data: bytes) -> int:
    h = 0xAAAAAAAA
    for i, b in enumerate(data):
        if i % 2 == 0:
            h ^= ((h << 7) & M) ^ ((b * (h >> 3)) & M)
        else:
            h ^= (~(((h << 11) & M) + (b ^ (h >> 5)))) & M
        h &= M
    return h


def be32(x: int) -> bytes:
    return x.to_bytes(4, "big")


def divide(digest: int, specs):
    words = [digest]

    def word(k):
        while len(words) <= k:
            words.append(ap_hash(be32(digest) + be32(len(words) - 1)))
        return words[k]

    q = digest
    used = 1

    def take(radix):
        nonlocal q, used
        if q < radix:
            q = q * (1 << 32) + word(used)
            used += 1
        r = q % radix
        q //= radix
        return r

    if len(specs) > 1:
        feat, radices = specs[take(len(specs))]
    else:
        feat, radices = specs[0]
    return feat, [take(r) for r in radices]


def map_message(op: str, nonce: int, payloads, specs, total, variant="Full"):
    digest = 0
    out = []
    p = len(payloads)
    for i in range(total):
        h1 = ap_hash(op.encode() + be32(nonce) + be32(digest))
        h2 = ap_hash(be32(nonce) + payloads[i % p])
        h3 = ap_hash(be32(nonce) + payloads[(p - 1 - i) % p])
        if variant == "Full":
            digest = ap_hash(be32(h1) + be32(h2) + be32(h3))
        elif variant == "H1Only":
            digest = h1
        elif variant == "H3Only":
            digest = h3
        elif variant == "H1H2":
            digest = ap_hash(be32(h1) + be32(h2))
        out.append(divide(digest, specs))
    return out


def default_specs():
    return [(f, DEFAULT_RADICES[f]) for f in FEATURES]


CASES = [
    ("UNLOCK", 1, ["01", "02"]),
    ("UNLOCK", 2, ["01", "02"]),
    ("LOCK", 1, ["01", "02"]),
    ("", 0, [""]),
    ("OPEN_TRUNK", 4294967295, ["deadbeef"]),
    ("SET_TEMP", 123456, ["00", "ff", "7f80", "0102030405"]),
    ("FIDO_REGISTER", 42, ["%02x" % i * 32 for i in range(16)]),
]


HASH_INPUTS = ["", "00", "ff", "61", "6162", "616263", "deadbeef", "00000000", "ffffffffffffffff", "554e4c4f434b00000001"]


def write_hashes(path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["input_hex", "hash_hex"])
        for x in HASH_INPUTS + [bytes(range(i, i + 40)).hex() for i in (0, 200)]:
            w.writerow([x, "%08x" % ap_hash(bytes.fromhex(x))])


def write_variants(path):
    specs = default_specs()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "operation", "nonce", "payloads_hex", "tasks"])
        for variant in ["Full", "H1Only", "H3Only", "H1H2"]:
            for op, nonce, pl in CASES[:3]:
                payloads = [bytes.fromhex(x) for x in pl]
                tasks = map_message(op, nonce, payloads, specs, 10, variant)
                enc = "|".join(f"{feat}:" + "/".join(str(a) for a in args) for feat, args in tasks)
                w.writerow([variant, op, nonce, "|".join(pl), enc])


def main(path):
    specs = default_specs()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["operation", "nonce", "payloads_hex", "tasks"])
        for op, nonce, pl in CASES:
            payloads = [bytes.fromhex(x) for x in pl]
            tasks = map_message(op, nonce, payloads, specs, 10)
            enc = "|".join(f"{feat}:" + "/".join(str(a) for a in args) for feat, args in tasks)
            w.writerow([op, nonce, "|".join(pl), enc])


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == "--hash":
        for s in sys.argv[2:]:
            print(s, hex(ap_hash(s.encode())))
    elif len(sys.argv) > 1 and sys.argv[1] == "--divide":
        print(divide(int(sys.argv[2]), [("Sram", [6, 256, 20])]))
    else:
        main(sys.argv[1] if len(sys.argv) > 1 else "mapping.csv")
        write_hashes("ap_hash.csv")
        write_variants("variants.csv")
