#!/usr/bin/env python3
"""
Bootstrap script for the HRTF upsampling toolkit

Prepares a fresh checkout: run directories, a .env from the template,
dependencies, and a two-subject synthetic dataset for a first pipeline run.
"""

import shutil
import subprocess
import sys
from pathlib import Path

RUN_DIRECTORIES = ('logs', 'data', 'checkpoints', 'reports')
REQUIRED_IMPORTS = ('numpy', 'scipy', 'pandas', 'pydantic', 'dotenv', 'pytest')
MIN_PYTHON = (3, 9)


def ok(message: str) -> None:
    print(f"✅ {message}")


def fail(message: str) -> bool:
    print(f"❌ {message}")
    return False


def check_interpreter() -> bool:
    if sys.version_info < MIN_PYTHON:
        return fail(f"Python {'.'.join(map(str, MIN_PYTHON))}+ required, found {sys.version.split()[0]}")
    ok(f"Python {sys.version_info.major}.{sys.version_info.minor}")
    return True


def prepare_workspace() -> bool:
    for name in RUN_DIRECTORIES:
        Path(name).mkdir(parents=True, exist_ok=True)
    ok(f"Run directories: {', '.join(RUN_DIRECTORIES)}")

    template, target = Path('.env.example'), Path('.env')
    if target.exists():
        ok(".env present, left unchanged")
        return True
    if not template.exists():
        return fail(".env.example is missing")
    shutil.copy(template, target)
    ok(".env created from .env.example")
    return True


def install_requirements() -> bool:
    try:
        subprocess.run([sys.executable, '-m', 'pip', 'install', '-r', 'requirements.txt'], check=True)
    except subprocess.CalledProcessError as e:
        return fail(f"pip exited with status {e.returncode}")
    ok("requirements.txt installed")
    return True


def verify_imports() -> bool:
    missing = []
    for module in REQUIRED_IMPORTS:
        try:
            __import__(module)
        except ImportError:
            missing.append(module)
    if missing:
        return fail(f"cannot import {', '.join(missing)}")
    ok(f"imports: {', '.join(REQUIRED_IMPORTS)}")
    return True


def write_smoke_dataset() -> bool:
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    from main import main as cli

    code = cli(['--force', 'synth', '--seed', '0', '--subjects', '2', '--bins', '16', '--out', 'data'])
    if code != 0:
        return fail(f"synth exited with code {code}")
    ok("data/subject_0000.hrg and data/subject_0001.hrg written")
    return True


STEPS = (
    ("Interpreter", check_interpreter),
    ("Workspace", prepare_workspace),
    ("Requirements", install_requirements),
    ("Imports", verify_imports),
    ("Smoke dataset", write_smoke_dataset),
)


def main() -> int:
    print("=" * 60)
    print("  HRTF Upsampling Toolkit - Setup")
    print("=" * 60)

    failed = []
    for name, step in STEPS:
        print(f"\n[{name}]")
        try:
            if not step():
                failed.append(name)
        except Exception as e:
            fail(f"{name} raised {type(e).__name__}: {e}")
            failed.append(name)

    print("\n" + "=" * 60)
    if failed:
        print(f"⚠️  {len(failed)} step(s) need attention: {', '.join(failed)}")
        return 1

    ok("Setup complete. Next:")
    print("   pytest")
    print("   python main.py train --data data --level 3 --max-steps 50 --out checkpoints/l3.hrc")
    print("   python main.py evaluate --method barycentric --data data --level 3 --report reports/bary.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
