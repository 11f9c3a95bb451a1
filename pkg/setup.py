from setuptools import setup

setup(name='gfcnn',
      version='1.0',
      description='Convolutional fault classifiers with a global feature '
                  'branch for multivariate process data.',
      packages=['gfcnn'],
      license='MIT',
      install_requires=['numpy', 'scipy', 'pandas', 'scikit-learn'],
      tests_require=['pytest'],
      entry_points={'console_scripts': ['gfcnn=gfcnn.gfcli:main']})
