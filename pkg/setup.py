from setuptools import setup

setup(
    name="lss_kernel",
    version="0.1.0",
    description="File-backed runtime kernel for artifact-driven agent systems",
    package_dir={"": "LSS-Kernel/src"},
    py_modules=[
        "agent_runtime",
        "artifact_store",
        "bench",
        "binding_engine",
        "config",
        "constants",
        "evolution_engine",
        "main",
        "provenance",
        "reasoner",
        "task_pool",
        "utils",
        "view_engine",
    ],
    install_requires=[
        "requests",
        "python-dotenv",
        "langchain_openai",
        "rank_bm25",
        "tqdm",
    ],
    entry_points={"console_scripts": ["lss=main:main"]},
    python_requires=">=3.8",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
)
