#!/usr/bin/env python3
"""
Install losbroadcast for the current user.

    python3 setup.py             # link ~/.local/bin/losbroadcast
    python3 setup.py uninstall   # remove the link and ~/.losbroadcast
"""

import os
import shutil
import sys
from pathlib import Path

from constants import CONFIG_DIR_NAME, SEPARATOR_LIGHT

REQUIRED_PACKAGES = ('numpy', 'scipy')
ENTRY_SCRIPT = Path(__file__).resolve().parent / 'losbroadcast.py'
BIN_DIR = Path.home() / '.local' / 'bin'
LINK = BIN_DIR / 'losbroadcast'


def missing_packages():
    missing = []
    for name in REQUIRED_PACKAGES:
        try:
            __import__(name)
        except ImportError:
            missing.append(name)
    return missing


def link_entry_script() -> bool:
    """Point ~/.local/bin/losbroadcast at the entry script, replacing an old link."""
    BIN_DIR.mkdir(parents=True, exist_ok=True)
    if LINK.is_symlink() or LINK.exists():
        LINK.unlink()
    try:
        LINK.symlink_to(ENTRY_SCRIPT)
    except OSError as e:
        print(f"[FAIL] cannot link {LINK}: {e}")
        return False
    ENTRY_SCRIPT.chmod(ENTRY_SCRIPT.stat().st_mode | 0o111)
    print(f"[OK] {LINK} -> {ENTRY_SCRIPT}")
    return True


def bin_dir_on_path() -> bool:
    return str(BIN_DIR) in os.environ.get('PATH', '').split(os.pathsep)


def install() -> bool:
    print("Installing losbroadcast")
    print(SEPARATOR_LIGHT)
    if sys.version_info < (3, 8):
        print("[FAIL] Python 3.8 or newer is required")
        return False
    print(f"[OK] Python {sys.version.split()[0]}")

    missing = missing_packages()
    if missing:
        print(f"[FAIL] missing packages: {', '.join(missing)} "
              f"(pip install -r requirements.txt)")
    else:
        print(f"[OK] {', '.join(REQUIRED_PACKAGES)} importable")

    if not link_entry_script():
        return False
    if not bin_dir_on_path():
        print(f"[FAIL] {BIN_DIR} is not on PATH; add it with")
        print(f"  echo 'export PATH=\"$HOME/.local/bin:$PATH\"' >> ~/.bashrc")

    print(SEPARATOR_LIGHT)
    if not missing and bin_dir_on_path():
        print("Try:")
        print("  losbroadcast norm --n 1024")
        print("  losbroadcast verify-lemmas --quick")
    return True


def uninstall() -> None:
    print("Uninstalling losbroadcast")
    if LINK.is_symlink() or LINK.exists():
        LINK.unlink()
        print(f"[OK] removed {LINK}")
    run_dir = Path.home() / CONFIG_DIR_NAME
    if run_dir.exists():
        shutil.rmtree(run_dir)
        print(f"[OK] removed {run_dir}")


def main() -> int:
    if sys.argv[1:2] == ['uninstall']:
        uninstall()
        return 0
    return 0 if install() else 1


if __name__ == '__main__':
    sys.exit(main())
