import struct

import pytest

from scanserve import ServiceConfig, serve


@pytest.fixture
def start():
    """Start services on ephemeral ports and tear them all down afterwards."""
    running = []

    def _start(model, delay=0.0):
        svc = serve(ServiceConfig(model=model, listen_addr="127.0.0.1:0", artificial_delay=delay))
        running.append(svc)
        return svc

    yield _start
    for svc in running:
        svc.close()


def tiny_pe(names: list[bytes], pe_offset: int = 64, optional_size: int = 0) -> bytes:
    """Smallest byte string the minimal header walk accepts: DOS magic,
    PE-offset field, signature, COFF header, bare section table. Far too
    little structure for a full parser."""
    dos = b"MZ" + bytes(0x3C - 2) + struct.pack("<I", pe_offset)
    coff = struct.pack("<HHIIIHH", 0x14C, len(names), 0, 0, 0, optional_size, 0x0102)
    table = b"".join(name.ljust(8, b"\0") + bytes(32) for name in names)
    return dos + b"PE\0\0" + coff + table
