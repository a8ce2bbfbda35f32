"""Service-key encryption: AES-256-CBC with encrypt-then-MAC (HMAC-SHA256).

Wire form of a ciphertext is ``iv (16) || body || tag (32)``.  Any failure
(wrong key, tampering, bad padding) raises the same :class:`DecryptionError`.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY_LEN = 32
IV_LEN = 16
TAG_LEN = 32


class DecryptionError(ValueError):
    pass


def sym_key_setup(rng: random.Random) -> bytes:
    return rng.randbytes(KEY_LEN)


def _subkeys(k: bytes) -> tuple[bytes, bytes]:
    enc = hmac.new(k, b"sa2fe enc", hashlib.sha256).digest()
    mac = hmac.new(k, b"sa2fe mac", hashlib.sha256).digest()
    return enc, mac


def sym_enc(k: bytes, plaintext: bytes, rng: random.Random) -> bytes:
    enc_key, mac_key = _subkeys(k)
    iv = rng.randbytes(IV_LEN)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    encryptor = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).encryptor()
    body = encryptor.update(padded) + encryptor.finalize()
    tag = hmac.new(mac_key, iv + body, hashlib.sha256).digest()
    return iv + body + tag


def sym_dec(k: bytes, ct: bytes) -> bytes:
    enc_key, mac_key = _subkeys(k)
    if len(ct) < IV_LEN + 16 + TAG_LEN or (len(ct) - IV_LEN - TAG_LEN) % 16:
        raise DecryptionError("ciphertext rejected")
    iv, body, tag = ct[:IV_LEN], ct[IV_LEN:-TAG_LEN], ct[-TAG_LEN:]
    if not hmac.compare_digest(tag, hmac.new(mac_key, iv + body, hashlib.sha256).digest()):
        raise DecryptionError("ciphertext rejected")
    decryptor = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).decryptor()
    padded = decryptor.update(body) + decryptor.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise DecryptionError("ciphertext rejected") from None


def pack_request(s_type: str, data: bytes) -> bytes:
    name = s_type.encode()
    return struct.pack(">I", len(name)) + name + data


def unpack_request(plain: bytes) -> tuple[str, bytes]:
    if len(plain) < 4:
        raise DecryptionError("malformed request")
    (n,) = struct.unpack_from(">I", plain)
    if 4 + n > len(plain):
        raise DecryptionError("malformed request")
    try:
        name = plain[4: 4 + n].decode()
    except UnicodeDecodeError:
        raise DecryptionError("malformed request") from None
    return name, plain[4 + n:]
