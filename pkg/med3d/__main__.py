from med3d.med3d_cli.med3dapp import run

run()
