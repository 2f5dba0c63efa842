from setuptools import find_packages, setup

with open("requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("#") and "pytest" not in line]

setup(
    name="gapscore",
    version="0.1.0",
    description="Isolation Forest, LODA and EGMM anomaly detection with missing-value strategies",
    packages=find_packages(exclude=("tests", "examples")),
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["gapscore=gapscore.cli:main"]},
)
