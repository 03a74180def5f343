from setuptools import setup

setup(
    name='fbsdex',
    version='0.1.0',
    description='Utility maximization by forward-backward SDEs',
    long_description=open('README.md', 'r').read(),
    long_description_content_type='text/markdown',
    license='MIT',
    entry_points={
        'console_scripts': [
            'fbsdex=fbsdex.cli:main'
        ]
    },
    packages=[
        'fbsdex',
        'fbsdex.cli',
    ],
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
        'pandas>=1.5',
        'tomli>=1.1; python_version<"3.11"',
    ],
    extras_require={
        'test': ['pytest>=7'],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
