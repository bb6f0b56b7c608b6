"""
tffquant package setup for pypi
"""

import setuptools
from tffquant.__version__ import VERSION

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="tffquant",
    include_package_data=True,
    version=VERSION,
    author="tffquant developers",
    description="Post-training quantization of linear layers in fusion frame space",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["test*"]),
    python_requires=">=3.11",
    install_requires=[
        "numpy>=1.26",
        "scipy>=1.11",
        "click>=8.1",
        "rich>=13.7",
    ],
    entry_points={
        "console_scripts": ["tffq=tffquant.cli:main"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
