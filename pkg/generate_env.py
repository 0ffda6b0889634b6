#!/usr/bin/env python3
"""
Utility script to generate a .env file for local runs
Run this script to pick a seed, worker count and work directory
"""

import os
import secrets
from datetime import datetime

DEFAULTS = {
    'VAD_SEED': 1234,
    'VAD_THREADS': 1,
    'VAD_LOG_LEVEL': 'INFO',
    'VAD_WORK_DIR': './runs',
}


def generate_seed() -> int:
    """Fresh random root seed for a new experiment series"""
    return secrets.randbelow(2 ** 31 - 1)


def generate_env_content(**overrides) -> str:
    """Render .env text; unknown keys are rejected"""
    unknown = sorted(set(overrides) - set(DEFAULTS))
    if unknown:
        raise KeyError(f"Unknown setting(s): {unknown}")
    values = {**DEFAULTS, **overrides}

    lines = [
        "# Environment variables for local runs",
        f"# Generated on {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
        "",
        "# Root seed every random draw derives from",
        f"VAD_SEED={values['VAD_SEED']}",
        "",
        "# Worker threads for feature extraction and batch assembly",
        f"VAD_THREADS={values['VAD_THREADS']}",
        "",
        f"VAD_LOG_LEVEL={values['VAD_LOG_LEVEL']}",
        f"VAD_WORK_DIR={values['VAD_WORK_DIR']}",
        "",
    ]
    return "\n".join(lines)


def write_env_file(env_path: str = '.env', force: bool = False, **overrides) -> str:
    if os.path.exists(env_path) and not force:
        raise FileExistsError(f"{env_path} already exists; pass force=True to overwrite")
    with open(env_path, 'w', encoding='utf-8') as f:
        f.write(generate_env_content(**overrides))
    return env_path


def generate_env_file(env_path: str = '.env'):
    """Interactive variant: asks before overwriting"""
    print("Generating environment variables...")
    force = False
    if os.path.exists(env_path):
        response = input(f"WARNING: {env_path} already exists. Overwrite? (y/N): ").lower()
        if response != 'y':
            print("Cancelled. Your existing .env file is unchanged.")
            return
        force = True

    threads = input(f"Worker threads [{os.cpu_count() or 1}]: ").strip() or str(os.cpu_count() or 1)
    seed = generate_seed()
    try:
        write_env_file(env_path, force=force, VAD_SEED=seed, VAD_THREADS=int(threads))
        print(f"Successfully generated {env_path}")
        print(f"Root seed: {seed}")
    except (OSError, ValueError) as e:
        print(f"Error creating .env file: {e}")


if __name__ == "__main__":
    print("VAD Environment Setup")
    print("=" * 40)

    while True:
        print("\nWhat would you like to do?")
        print("1. Generate .env file")
        print("2. Print a fresh seed only")
        print("3. Exit")

        choice = input("\nEnter your choice (1-3): ").strip()

        if choice == '1':
            generate_env_file()
        elif choice == '2':
            print(f"VAD_SEED={generate_seed()}")
        elif choice == '3':
            print("Goodbye!")
            break
        else:
            print("Invalid choice. Please enter 1, 2, or 3.")
