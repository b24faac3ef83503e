from setuptools import setup

setup(
    name='med3d',
    version='0.1.0',
    description='Multi-domain 3D medical volume pre-training and transfer learning',
    license='MIT',
    packages=['med3d', 'med3d.med3d_cli', 'med3d.med3d_tools'],
    python_requires='>=3.7',
    install_requires=['numpy', 'scipy', 'scikit-image', 'scikit-learn'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['med3d = med3d.med3d_cli.med3dapp:run']},
)
