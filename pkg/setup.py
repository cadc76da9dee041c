from setuptools import find_packages, setup


with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="tsflora",
    version="0.1.0",
    description="Token-compressed split federated LoRA fine-tuning simulator",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "pydantic~=2.10.4",
        "pydantic_core>=2.27.2,<2.28.0",
        "loguru~=0.7.3",
        "numpy",
    ],
    extras_require={
        "test": ["pytest~=8.3.5"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.11",
    entry_points={
        "console_scripts": [
            "tsflora=main:main",
        ],
    },
    py_modules=["main"],
)
