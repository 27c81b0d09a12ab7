#!/usr/bin/env python
# -*- encoding: utf-8 -*-
import io
import re
from os.path import dirname
from os.path import join

from setuptools import find_packages
from setuptools import setup


def read(*names, **kwargs):
    with io.open(
        join(dirname(__file__), *names),
        encoding=kwargs.get("encoding", "utf8")
    ) as fh:
        return fh.read()


setup(
    name="retarget",
    version="0.1.0",
    license="MIT",
    description="Two-phase adversarial one-class classification with discriminator retargeting.",
    long_description="%s\n%s" % (
        re.compile("^.. start-badges.*^.. end-badges", re.M | re.S).sub("", read("README.rst")),
        re.sub(":[a-z]+:`~?(.*?)`", r"``\1``", read("CHANGELOG.rst"))
    ),
    packages=find_packages("src"),
    package_dir={"": "src"},
    include_package_data=True,
    zip_safe=False,
    classifiers=[
        # complete classifier list: http://pypi.python.org/pypi?%3Aaction=list_classifiers
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: Unix",
        "Operating System :: POSIX",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: Implementation :: CPython",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Private :: Do Not Upload",
    ],
    keywords=[
        "anomaly detection", "one-class classification", "gan",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.17",
        "scipy",
        "torch>=1.13",
        "torchvision",
        "Pillow",
        "pandas>=1.0",
        "tqdm",
    ],
    extras_require={
    },
    entry_points={
        "console_scripts": [
            "retarget = retarget.cli:main",
        ]
    },
)
