"""Deterministic ``.npz`` writing: fixed member timestamps so identical content gives identical bytes."""

import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path, header: dict, arrays: dict, header_key="__header__"):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        members = {header_key: np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
        members.update(arrays)
        for name, arr in members.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_header(z, header_key="__header__"):
    return json.loads(bytes(z[header_key]).decode())
